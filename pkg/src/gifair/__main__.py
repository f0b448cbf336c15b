import sys

from gifair.cli import main

sys.exit(main())
