"""
A subprocess backend worker. Reads one JSON request per line from stdin and
writes one JSON reply per line to stdout. Generation answers with a synthetic
envelope whose score grows with the prompted ability, so the synthetic scorer
can grade it.
"""

import json
import sys

import numpy as np

from psychocal.sim_engine import format_envelope, pseudo_embedding


def handle(request):
    item = request["item"]
    if request["kind"] == "generate":
        rng = np.random.default_rng(request["seed"])
        top = item["num_categories"] - 1
        expected = top / (1.0 + np.exp(-request["theta"]))
        score = int(np.clip(rng.normal(expected, 0.5).round(), 0, top))
        features = pseudo_embedding(item["item_id"], request["theta"], score)
        return {"ok": True, "text": format_envelope(item["item_id"], score, features)}
    if request["kind"] == "score":
        return {"ok": True, "score": min(len(request["text"]) % 3, item["num_categories"] - 1)}
    return {"ok": False, "error": f"unknown request kind {request['kind']}"}


def main():
    for line in sys.stdin:
        if line.strip():
            sys.stdout.write(json.dumps(handle(json.loads(line))) + "\n")
            sys.stdout.flush()


if __name__ == "__main__":
    main()
