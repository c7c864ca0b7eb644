import sys

from rubicone.cli import main

sys.exit(main())
