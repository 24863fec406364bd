import sys

from graybox.harness.cli import main

sys.exit(main())
