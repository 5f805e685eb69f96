"""
The command line, end to end
============================

generate -> train -> eval -> predict -> report, all in a scratch directory.
Equivalent to typing the same ``udaqa`` commands in a shell.
"""

import json
import tempfile
from pathlib import Path

from udaqa.cli import main

work = Path(tempfile.mkdtemp())
data, ckpt = work / "data", work / "model.ckpt"

main(["generate", "--out", str(data), "--n-samples", "200", "--seed", "7"])
main(["train", "--data", str(data), "--out", str(ckpt), "--epochs", "20"])
main(["eval", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(work / "eval.json")])
main(["predict", "--data", str(data), "--checkpoint", str(ckpt), "--samples", "7", "--out", str(work / "pred.csv")])
main(["report", "--data", str(data), "--predictions", str(work / "pred.csv"), "--out", str(work / "report")])

print(sorted(p.name for p in work.iterdir()))
print(json.dumps(json.loads((work / "eval.json").read_text()), indent=1)[:400])
print((work / "report.csv").read_text().splitlines()[:3])
