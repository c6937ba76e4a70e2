"""
Environment configuration for the gated attention classifier
"""

import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Logging
LOG_LEVEL = os.getenv("GATN_LOG_LEVEL", "INFO")

# Run outputs and an optional flat key = value config file
DEFAULT_OUTPUT_DIR = os.getenv("GATN_OUTPUT_DIR", "runs")
DEFAULT_CONFIG_FILE = os.getenv("GATN_CONFIG_FILE")

# Gradient verification thresholds
GRADCHECK_OP_TOLERANCE = float(os.getenv("GATN_GRADCHECK_OP_TOLERANCE", "1e-4"))
GRADCHECK_COMPOSED_TOLERANCE = float(os.getenv("GATN_GRADCHECK_COMPOSED_TOLERANCE", "1e-3"))
