"""Rewrite tests/golden/cases.json from the current implementation.

Run only after a deliberate numerical change; review the diff before committing.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from golden_cases import compute_cases  # noqa: E402


def main() -> None:
    out = ROOT / "tests" / "golden" / "cases.json"
    out.write_text(json.dumps(compute_cases(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
