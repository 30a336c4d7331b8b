"""Independent straight-line re-implementation of the reference model.

Deliberately written with explicit Python loops and math.sin so that it
shares no code path with the package; golden tests compare the two.
"""

import math

import numpy as np


def ref_weight(tag: int, i: int, j: int, fan_in: int) -> float:
    return 0.5 * math.sin(0.37 * (977 * tag + 131 * i + 7 * j + 1)) / math.sqrt(fan_in)


def ref_embed(v: int, j: int) -> float:
    return math.sin(0.61 * (31 * v + j + 1))


def _matrix(tag, n_rows, n_cols, fan_in):
    return np.array(
        [[ref_weight(tag, i, j, fan_in) for j in range(n_cols)] for i in range(n_rows)]
    )


def _rope_row(row, pos, rope_base):
    d = len(row)
    out = np.empty(d)
    for p in range(d // 2):
        theta = rope_base ** (-2.0 * p / d)
        ang = pos * theta
        c, s = math.cos(ang), math.sin(ang)
        out[2 * p] = row[2 * p] * c - row[2 * p + 1] * s
        out[2 * p + 1] = row[2 * p] * s + row[2 * p + 1] * c
    return out


def ref_prefill(n_layers, n_heads, d_head, vocab_size, tokens, rope_base=10000.0, start_pos=0):
    """Full causal pass; returns (k_pre f32, v f32, final states f64)."""
    d_model = n_heads * d_head
    n = len(tokens)
    x = np.array([[ref_embed(t, j) for j in range(d_model)] for t in tokens])
    k_pre = np.zeros((n_layers, n_heads, n, d_head), dtype=np.float32)
    v_all = np.zeros_like(k_pre)
    for layer in range(n_layers):
        wq = [_matrix(layer * 64 + h * 4 + 0, d_model, d_head, d_model) for h in range(n_heads)]
        wk = [_matrix(layer * 64 + h * 4 + 1, d_model, d_head, d_model) for h in range(n_heads)]
        wv = [_matrix(layer * 64 + h * 4 + 2, d_model, d_head, d_model) for h in range(n_heads)]
        wo = [_matrix(layer * 64 + h * 4 + 3, d_head, d_model, d_head) for h in range(n_heads)]
        for h in range(n_heads):
            k_pre[layer, h] = (x @ wk[h]).astype(np.float32)
            v_all[layer, h] = (x @ wv[h]).astype(np.float32)
        delta = np.zeros((n, d_model))
        for h in range(n_heads):
            q = x @ wq[h]
            k64 = k_pre[layer, h].astype(np.float64)
            v64 = v_all[layer, h].astype(np.float64)
            for t in range(n):
                pos_t = start_pos + t
                q_rot = _rope_row(q[t], pos_t, rope_base)
                scores = []
                for u in range(t + 1):
                    k_rot = _rope_row(k64[u], start_pos + u, rope_base)
                    scores.append(float(q_rot @ k_rot) / math.sqrt(d_head))
                m = max(scores)
                weights = [math.exp(s - m) for s in scores]
                z = sum(weights)
                attn = np.zeros(d_head)
                for u in range(t + 1):
                    attn += (weights[u] / z) * v64[u]
                delta[t] += attn @ wo[h]
        x = x + delta
    return k_pre, v_all, x
