"""
The same experiment through the command line
============================================

Every stage reads and writes files, so the pipeline can be stopped and
resumed.  The shell equivalent is::

    gnneval gen-sbm --out bench --K 60
    gnneval train-gnn --config bench/run.cfg
    gnneval build-discgraphs --config bench/run.cfg
    gnneval train-evaluator --config bench/run.cfg
    gnneval estimate --config bench/run.cfg --with-truth
    gnneval baseline --config bench/run.cfg --with-truth
    gnneval report --config bench/run.cfg
"""
import os
import sys
import tempfile

from gnneval.cli import main

root = os.path.join(tempfile.mkdtemp(), "bench")
main(["gen-sbm", "--out", root, "--K", "60", "--nodes-per-class", "100"])
cfg = os.path.join(root, "run.cfg")
with open(cfg, "a") as fh:
    fh.write("eval_epochs = 150\n")
print(open(cfg).read())

for cmd in (["train-gnn"], ["build-discgraphs"], ["train-evaluator"],
            ["estimate", "--with-truth"], ["baseline", "--with-truth"], ["report"]):
    print(f"$ gnneval {' '.join(cmd)} --config {cfg}")
    code = main([*cmd, "--config", cfg])
    if code:
        sys.exit(code)
    print()

print("artifacts under", os.path.join(root, "run"))
