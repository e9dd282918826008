"""Multiple imputation for survey nonresponse with known population margins."""
__version__ = "0.1.0"
