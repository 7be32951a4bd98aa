__version__ = "0.1.0"
MANIFEST_SCHEMA_VERSION = 1
