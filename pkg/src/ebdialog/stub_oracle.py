"""NDJSON entailment server backed by :class:`LexicalOverlapOracle`.

Run as ``python3 -m ebdialog.stub_oracle``; reads one
``{"premise": ..., "hypothesis": ...}`` object per line on stdin and writes
``{"label": ...}`` per line on stdout. Useful for exercising
``ebdialog evaluate --oracle-cmd`` without an NLI model.
"""

from __future__ import annotations

import json
import sys

from .metrics import LexicalOverlapOracle


def main() -> int:
    oracle = LexicalOverlapOracle()
    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        sys.stdout.write(json.dumps({"label": oracle(req["premise"], req["hypothesis"])}) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
