import sys

from engagefuse.cli import main

sys.exit(main())
