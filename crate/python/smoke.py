"""Smoke test for the seqboat Python extension.

Build and install the wheel first (see the README), then run
`python python/smoke.py`.
"""

import json
import math

import seqboat_py as sb


def main():
    model = sb.Model.tiny(vocab=11, n_layers=2, d_m=8, window=4, max_len=32, seed=1)
    cfg = json.loads(model.config)
    assert cfg["d_m"] == 8 and cfg["n_layers"] == 2
    assert model.num_params == sum(math.prod(s) for _, s in model.parameter_shapes())

    tokens = [1, 4, 2, 9, 0, 3, 3, 7]
    logits, trace = model.forward(tokens)
    assert len(logits) == len(tokens) and len(logits[0]) == 11
    assert len(trace) == 2
    for a, c, r in trace:
        assert r == sum(a)
        assert all(0.5 <= x <= 1.0 for x in c)

    streamed = model.stream(tokens)
    worst = max(abs(x - y) for row_s, row_p in zip(streamed, logits) for x, y in zip(row_s, row_p))
    assert worst < 1e-7, worst

    h = [[[float(10 * t + j) for j in range(3)] for t in range(4)]]
    hc, index_q = sb.compress(h, [[0, 1, 0, 1]])
    assert hc == [[h[0][1], h[0][3]]]
    assert index_q == [[0, 1, 0, 2]]
    back = sb.extract(hc, index_q)
    assert back == [[[0.0] * 3, h[0][1], [0.0] * 3, h[0][3]]]

    loss = model.loss(tokens, tokens[1:] + [0])
    assert math.isfinite(loss) and loss > 0
    print("smoke ok: streaming max diff %.2e, loss %.4f" % (worst, loss))


if __name__ == "__main__":
    main()
