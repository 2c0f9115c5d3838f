"""HTTP adapter hosting a captioning model behind the ictx wire protocol."""

__version__ = "0.1.0"
