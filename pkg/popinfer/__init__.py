"""popinfer - Inferring trader-population composition from price series"""

__version__ = "1.0.0"
