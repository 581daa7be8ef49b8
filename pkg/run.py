import sys

from sepsis_fusion import main

if __name__ == "__main__":
    sys.exit(main())
