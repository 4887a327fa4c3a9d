"""Smoke test for the pyspkver extension.

Build and run from the repository root:

    cargo build -p spkver-py --features extension-module --release
    cp target/release/libpyspkver.so python/pyspkver.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pyspkver as sv


def main():
    # Metrics on a perfectly separated list.
    assert sv.compute_eer([0.9, 0.8, 0.1, 0.2], [True, True, False, False]) == 0.0
    assert sv.compute_min_dcf([0.9, 0.1], [True, False], p_target=0.01) == 0.0
    assert abs(sv.cosine_score([1.0, 0.0], [1.0, 1.0]) - math.sqrt(0.5)) < 1e-12

    # Margin 1 without annealing is the plain softmax loss on normalized weights.
    x = [[1.0, 0.5], [0.2, -0.3]]
    w = [[1.0, 0.0], [0.0, 1.0]]
    loss = sv.asoftmax_loss(x, w, [0, 1], 1)
    ref = 0.0
    for row, y in zip(x, [0, 1]):
        logits = [row[0], row[1]]
        ref += -logits[y] + math.log(sum(math.exp(v) for v in logits))
    assert abs(loss - ref / 2) < 1e-10, (loss, ref / 2)

    # Front end on two seconds of a modulated tone.
    sr = 8000
    samples = [0.3 * math.sin(0.07 * i) * (1 + math.sin(0.001 * i)) for i in range(2 * sr)]
    feats = sv.mfcc(samples, sr)
    assert feats and len(feats[0]) == 23

    corpus = sv.synthetic_corpus(n_speakers=2, utterances_per_speaker=2, dim=23, seed=1)
    assert len(corpus) == 4
    utt_id, speaker, frames = corpus[0]

    model = sv.Extractor.maxpool(2, widths=(16, 32, 16, 8))
    assert model.embedding_dim == 8
    assert model.receptive_fields()[-1][1] <= model.min_frames
    emb = model.embed(frames)
    assert len(emb) == 8 and all(math.isfinite(v) for v in emb)
    assert model.embed(frames) == emb

    try:
        model.embed(frames[:5])
    except ValueError:
        pass
    else:
        raise AssertionError("short input accepted")

    scorer = sv.Backend.cosine()
    assert scorer.kind == "cosine"
    assert abs(scorer.score(emb, emb) - 1.0) < 1e-12

    worst = max(err for _, err in sv.gradient_suite(primitives_only=True))
    assert worst < 1e-4, worst

    print(f"ok: {utt_id} ({speaker}) {len(frames)} frames, {model!r}")


if __name__ == "__main__":
    main()
