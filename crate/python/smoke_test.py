"""Smoke test for the diffact Python extension.

Build and install first:

    pip install maturin
    cd crates/py && maturin develop --release
"""

import json
import math

import diffact


def check_schedule():
    assert diffact.gamma(0.0) == 1.0
    assert abs(diffact.gamma(0.5) - math.cos(math.pi / 4)) < 1e-12
    targets = [diffact.keep_target(r, 4, 56) for r in range(4)]
    assert targets == sorted(targets) and targets[-1] == 56, targets


def check_tokenizer():
    cols = [[i / 99.0 for i in range(100)], [float(i % 2) for i in range(100)]]
    tok = diffact.Tokenizer.fit(cols, 16, gripper_dim=1)
    rows = [[0.25, 1.0], [0.75, 0.0]]
    tokens = tok.tokenize(rows)
    back = tok.detokenize(tokens)
    assert back[0][1] == 1.0 and back[1][1] == 0.0
    assert abs(back[0][0] - 0.25) < 1.0 / 16
    again = diffact.Tokenizer.from_json(tok.to_json())
    assert again.checksum() == tok.checksum()
    assert tok.mask_id == 16


def check_oracle():
    oracle = diffact.TabulatedOracle.random(3, 3, 2, seed=5)
    for ctx in range(2):
        for scoring in ("max_confidence", "confidence_gap"):
            got = oracle.decode(ctx, rounds=3, scoring=scoring)
            want = oracle.exhaustive_decode(ctx, rounds=3, scoring=scoring)
            assert got.tokens == want, (ctx, scoring, got.tokens, want)
            assert got.nfe == 3
            lines = got.trace_jsonl.strip().splitlines()
            assert len(lines) == 3
            assert json.loads(lines[0])["schema"] == "diffact.decode_trace"


def check_policy():
    bench = json.dumps({"num_bins": 16})
    data = diffact.Dataset.generate(200, seed=3, bench=bench)
    assert len(data) == 200
    model = data.train(seed=3, steps=5)
    task = data.held_out_ids()[0]
    ctx = data.context(task)
    res = model.decode(ctx, rounds=4, seed=1)
    assert res.nfe == 4
    assert len(res.tokens) == 56 and max(res.tokens) < 16
    again = model.decode(ctx, rounds=4, seed=1)
    assert again.tokens == res.tokens
    post = model.forward(ctx, [16] * 56)
    assert len(post) == 56 and abs(sum(post[0]) - 1.0) < 1e-9
    expert = data.expert_tokens(task)
    assert data.final_distance(task, expert) >= 0.0
    report = json.loads(data.evaluate(model, episodes=3, rounds=2))
    assert report["episodes"] == 3


if __name__ == "__main__":
    check_schedule()
    check_tokenizer()
    check_oracle()
    check_policy()
    print("python smoke test passed")
