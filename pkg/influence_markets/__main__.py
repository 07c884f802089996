# Standard library
import sys

# First-party/Local
from influence_markets.cli_io import main

sys.exit(main())
