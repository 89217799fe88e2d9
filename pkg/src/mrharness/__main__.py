import sys

from mrharness.cli import main

sys.exit(main())
