"""Shared bits for the experiment scripts (run from the repo root or anywhere)."""
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))


def dump(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


def parse_counts(text):
    """'BN=100,LG=50,HG=50' -> dict."""
    out = {}
    for part in text.split(","):
        name, n = part.split("=")
        out[name.strip()] = int(n)
    return out
