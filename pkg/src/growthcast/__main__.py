"""Allow ``python -m growthcast``."""

import sys

from .cli import main

sys.exit(main())
