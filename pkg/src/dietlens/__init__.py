"""End-to-end food localization, classification and portion (kcal) estimation."""

__version__ = "0.1.0"
