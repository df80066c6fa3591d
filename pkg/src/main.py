import sys

from dual_skew_seq2seq.cli import main

if __name__ == "__main__":
    sys.exit(main())
