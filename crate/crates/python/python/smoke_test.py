"""Smoke test for the presslm Python bindings.

Build and install first (`maturin develop -m crates/python/Cargo.toml`), or put
the compiled library on PYTHONPATH as presslm_py.so.
"""

import json
import os
import sys
import tempfile

import presslm_py as pl

TINY = {
    "model": {
        "geometry": {"rows": 8, "cols": 8},
        "embedding": {"patch_size": 4, "embed_dim": 16, "encoder_depth": 1, "encoder_heads": 2},
        "lm": {"hidden": 16, "depth": 1, "heads": 2},
    }
}


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def cli(*args):
    code, out, err = pl.run_cli(list(args))
    if code != 0:
        print(err, file=sys.stderr)
    return code, out


def main():
    check(pl.patch_count(32, 32, 8) == 16, "patch count")
    check(pl.patch_count(30, 30, 8) == 16, "padded patch count")
    mx, mn, mean, var = pl.map_stats(2, 2, [0.0, 0.5, 0.5, 1.0])
    check((mx, mn, mean) == (1.0, 0.0, 0.5) and abs(var - 0.125) < 1e-12, "map stats")

    s = "the left hip carries most of the load"
    check(abs(pl.bleu(s, [s]) - 1.0) < 1e-9, "bleu identity")
    check(abs(pl.rouge_l("the cat sat on the mat", "the cat on the mat") - 10 / 11) < 1e-9, "rouge-l hand case")
    check(abs(pl.meteor("the cat sat", "the sat cat") - 0.5) < 1e-9, "meteor hand case")
    check(abs(pl.semantic_f(s, s) - 1.0) < 1e-9, "semantic f identity")
    check(abs(pl.score_final(0.8, 0.6, 0.5) - 0.7) < 1e-12, "final score")
    try:
        pl.score_final(1.5, 0.6, 0.5)
        check(False, "out of range score rejected")
    except RuntimeError:
        check(True, "out of range score rejected")

    with tempfile.TemporaryDirectory() as d:
        cfg = os.path.join(d, "tiny.json")
        with open(cfg, "w") as f:
            json.dump(TINY, f)
        data, run = os.path.join(d, "data"), os.path.join(d, "run")
        corpus = os.path.join(data, "corpus.jsonl")
        code, _ = cli("--config", cfg, "synth-data", "--count", "2", "--kb-records", "12", "--out", data)
        check(code == 0, "synth-data")
        code, _ = cli("--config", cfg, "build-dataset", "--manifest", os.path.join(data, "manifest.jsonl"),
                      "--kb", os.path.join(data, "kb.jsonl"), "--out", corpus, "--tasks", "description")
        check(code == 0, "build-dataset")
        code, _ = cli("--config", cfg, "train", "--corpus", corpus, "--out", run, "--epochs", "1",
                      "--max-len", "2048", "--pretrain-steps", "2")
        check(code == 0, "train")

        map_path = os.path.join(data, "maps", "map_00000.csv")
        rows = pl.load_map(map_path, 8, 8)
        check(len(rows) == 8 and all(0.0 <= v <= 1.0 for r in rows for v in r), "load map")

        model = pl.Model(run)
        check(model.parameter_count > 0, "model loads")
        check(model.infer(map_path, "describe it", max_new_tokens=0) == "", "zero tokens is empty")
        a = model.infer(map_path, "describe it", max_new_tokens=8)
        check(a == model.infer(map_path, "describe it", max_new_tokens=8), "greedy decoding repeats")
        try:
            pl.Model(os.path.join(d, "missing"))
            check(False, "missing checkpoint raises")
        except FileNotFoundError:
            check(True, "missing checkpoint raises")

    print("smoke test passed")


if __name__ == "__main__":
    main()
