"""Test package for the pipeline"""
import sys
from pathlib import Path

# repo root, so `app` and `tests.oracles` import without installation
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
