#!/usr/bin/env python3
"""Run the acceptance suite; one PASS/FAIL line per criterion ends the output."""
import os
import sys

import pytest

HERE = os.path.dirname(os.path.abspath(__file__))

if __name__ == "__main__":
    target = os.path.join(HERE, os.pardir, "tests", "test_acceptance.py")
    sys.exit(pytest.main([target, "-q", "-p", "no:cacheprovider", *sys.argv[1:]]))
