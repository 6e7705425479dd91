import sys

from gepiii.cli import main

sys.exit(main())
