"""Smoke test for the mtforge extension module.

Build and run:
    cargo build --release -p mtforge-py --features extension-module
    cp target/release/libmtforge.so python/mtforge.so
    python3 python/smoke_test.py
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import mtforge  # noqa: E402


def main():
    toks = mtforge.tokenize("The NASA probe, launched today.", lang="en")
    assert toks == ["The", "NASA", "probe", ",", "launched", "today", "."], toks
    marked = mtforge.mark_case(toks)
    assert mtforge.unmark_case(marked) == toks
    assert mtforge.detokenize(toks) == "The NASA probe, launched today."
    assert mtforge.tokenize("药物每日一次", lang="zh", lexicon=["药物", "每日"]) == ["药物", "每日", "一", "次"]

    bpe = mtforge.Bpe.learn(["low"] * 5 + ["lower"] * 2, 2)
    assert bpe.merges == [("l", "o"), ("lo", "w")], bpe.merges
    applied = bpe.apply("lower <BIO>")
    assert mtforge.bpe_undo(applied) == "lower <BIO>"

    tagged = mtforge.tag(["药物"], "BT", "NEWS")
    assert tagged == ["<BT>", "<NEWS>", "药物"]
    assert mtforge.strip_tags(tagged) == (("BT", "NEWS"), ["药物"])
    noisy = mtforge.noise(["a", "b", "c", "d"], seed=3)
    assert noisy == mtforge.noise(["a", "b", "c", "d"], seed=3)

    kept, report = mtforge.filter_pairs(
        [("药物 每日", "the drug daily"), ("same", "same")],
        rules=json.dumps({"align": None}),
    )
    assert kept == [("药物 每日", "the drug daily")]
    assert report["drops"]["identical"] == 1

    hyp, ref = ["the cat sat on the mat"], ["the cat is on the mat"]
    expected = 100 * (5 / 6 * 4 / 6 * 2 / 5 * 1 / 4) ** 0.25
    assert abs(mtforge.bleu(hyp, ref) - expected) < 1e-6
    m = mtforge.self_bleu_matrix([["a b c d"], ["a b c e"], ["x y"]])
    assert all(m[i][i] == 100.0 for i in range(3))
    picked, _ = mtforge.select_ensemble([30.0, 29.0, 20.0], m, 2, lambda_=0.0)
    assert picked == [0, 1]

    g = mtforge.grad_check("AAN", n=20)
    assert g["max_rel_err"] < 1e-3, g

    with tempfile.TemporaryDirectory() as work:
        cfg = {
            "work_dir": work,
            "seed": 2,
            "data": {"kind": "toy", "news_pairs": 20, "bio_pairs": 20, "mono_tgt": 10, "mono_src": 5, "dev": 4, "test": 4},
            "bpe": {"src_ops": 5, "tgt_ops": 5},
            "model": {"hidden": 8, "ffn": 16, "heads": 2},
            "train": {"base_updates": 3, "reverse_updates": 3, "aug_updates": 3},
            "finetune": {"updates": 2},
            "ensemble": {"k": 2},
        }
        out = mtforge.run_pipeline(json.dumps(cfg))
        assert out["ran"][0] == "prepare" and out["report"], out
        again = mtforge.run_pipeline(json.dumps(cfg), resume=True)
        assert again["ran"] == [] and again["digest"] == out["digest"]

        model = mtforge.Model.load(os.path.join(work, "models", "base.ckpt"))
        src = open(os.path.join(work, "tag", "dev.src"), encoding="utf-8").readline().strip()
        assert isinstance(model.translate(src, beam=2), str)

    print("mtforge python smoke test: ok")


if __name__ == "__main__":
    main()
