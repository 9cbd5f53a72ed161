"""End-to-end check of the `cuegen` Python module.

    cargo build -p cuegen-py --release
    python3 python/smoke_test.py

Without an installed `cuegen`, the freshly built library under
target/release is copied to a temp dir as `cuegen.so` and imported from
there.
"""

import importlib
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        return importlib.import_module("cuegen")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libcuegen_py.so"
        if lib.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "cuegen.so")
            sys.path.insert(0, str(tmp))
            return importlib.import_module("cuegen")
    sys.exit("cuegen not importable; run `cargo build -p cuegen-py --release` first")


def main():
    cg = load_module()

    # corpus
    raw = cg.synthetic_scripts(scripts=12, seed=3)
    scripts = [cg.parse_script(r) for r in raw]
    assert all(s.num_cues > 0 and s.num_dialogue > 0 for s in scripts)
    back = cg.read_jsonl(cg.write_jsonl(scripts))
    assert all(a.same_content(b) for a, b in zip(scripts, back))
    assert cg.parse_script(scripts[0].to_text()).same_content(scripts[0])
    lines = scripts[0].lines()
    assert {l["kind"] for l in lines} == {"cue", "dialogue"}
    try:
        cg.parse_script("")
        raise AssertionError("empty script parsed")
    except cg.CuegenError as e:
        print("empty script ->", e)

    # metrics
    assert cg.levenshtein("kitten", "sitting") == 3
    assert cg.lcsr("(He sits.)", "(He sits.)") == 1.0
    assert 0.0 <= cg.bi_sim("(He sits.)", "(She stands.)") < 1.0
    assert cg.dist_n([["a", "b", "a", "b"]], 2) == 2 / 3
    refs = [c for s in scripts for c in s.cues()]
    assert cg.nearest_cues(refs[5], refs, top_r=1)[0][1] == 0
    p, q = [0.7, 0.2, 0.1], [0.1, 0.3, 0.6]
    assert cg.fuse(p, q, 1.0) == p and cg.fuse(p, q, 0.0) == q

    # models
    texts = [t for s in scripts for t in s.model_texts()]
    vocab = cg.train_tokenizer(texts, max_vocab=400)
    ck, report = cg.train_lm(
        scripts,
        vocab,
        config={"layers": 1, "heads": 2, "d_model": 32, "d_ff": 64, "context": 64},
        hyper={"steps": 60, "batch": 8, "lr": 0.004},
    )
    assert report["val_perplexity"] < report["uniform_perplexity"], report
    print(ck, "val ppl %.1f" % report["val_perplexity"])
    prefix = "ANNA. I want the truth."
    assert ck.sample(prefix, max_len=8, seed=1) == ck.sample(prefix, max_len=8, seed=1)
    try:
        cg.train_lm(scripts, vocab, config={"layerz": 1})
        raise AssertionError("unknown config key accepted")
    except cg.CuegenError as e:
        print("bad config ->", e)

    head, head_report = ck.train_cue_head(scripts[:6], hyper={"epochs": 60})
    assert head.classes == ["dialogue", "cue"]
    print(head, "train accuracy %.2f" % head_report["train_accuracy"])

    with tempfile.TemporaryDirectory() as d:
        ck.save(f"{d}/lm.bin")
        head.save(f"{d}/head.bin")
        ck2 = cg.Checkpoint.load(f"{d}/lm.bin")
        head2 = cg.Head.load(f"{d}/head.bin")
    assert ck2.sample(prefix, max_len=8, seed=2) == ck.sample(prefix, max_len=8, seed=2)
    assert head2.log_probs(ck2, "( ANNA sits . )") == head.log_probs(ck, "( ANNA sits . )")

    topics = cg.fit_topics(refs, params={"k": 3, "iters": 30})
    assert len(topics.top_words(0, 5)) == 5

    gen = cg.Generator(ck, cue_head=head, topics=topics)
    out = gen.generate(
        prefix,
        attribute="cue",
        params={"alpha": 2.0, "num_iterations": 3, "max_len": 8, "seed": 4},
        num_candidates=2,
        compare=True,
    )
    lls = [c["attribute_log_likelihood"] for c in out["candidates"]]
    assert lls == sorted(lls, reverse=True)
    assert len(out["unsteered"]["texts"]) == 2
    print("cue candidate:", out["candidates"][0]["cue_text"])
    plain = gen.generate(prefix, params={"alpha": 0.0, "max_len": 8, "seed": 9})
    assert plain["candidates"][0]["text"] == ck.sample(prefix, max_len=8, seed=9)
    topic = gen.generate(prefix, attribute="topic:1", params={"max_len": 6})
    assert topic["attribute"] == "topic:1"
    try:
        gen.generate(prefix, attribute="emotion:joy")
        raise AssertionError("emotion without a head")
    except cg.CuegenError as e:
        print("emotion without head ->", e)

    print("smoke test passed")


if __name__ == "__main__":
    main()
