"""lumenav: a vision-only endoluminal navigation stack at desk scale."""

__version__ = "0.1.0"
