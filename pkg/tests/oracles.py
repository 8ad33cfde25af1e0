"""Brute-force scalar reference implementations.

Everything here uses plain Python floats and explicit loops so that it shares
no code path with the tensor implementations under test.
"""

import math


def softmax(row, T=1.0):
    scaled = [v / T for v in row]
    m = max(scaled)
    exps = [math.exp(v - m) for v in scaled]
    s = sum(exps)
    return [e / s for e in exps]


def kl(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def tempered_kl(student, teacher, T, kl_order="as_printed"):
    """T^2 times the batch mean of the row-wise KL of tempered softmaxes."""
    total = 0.0
    for s_row, t_row in zip(student, teacher):
        p, q = softmax(s_row, T), softmax(t_row, T)
        total += kl(p, q) if kl_order == "as_printed" else kl(q, p)
    return T * T * total / len(student)


def cosine(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))


def cosine_matrix(features, anchors):
    return [[cosine(f, a) for a in anchors] for f in features]


def mean_abs_diff(a, b):
    total, count = 0.0, 0
    for row_a, row_b in zip(a, b):
        for x, y in zip(row_a, row_b):
            total += abs(x - y)
            count += 1
    return total / count


def cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        log_z = m + math.log(sum(math.exp(v - m) for v in row))
        total += log_z - row[y]
    return total / len(logits)


def spatial_sq(zs, zt):
    """Quadruple loop: sum over channels, mean over sites, mean over batch."""
    B, D, H, W = len(zs), len(zs[0]), len(zs[0][0]), len(zs[0][0][0])
    total = 0.0
    for b in range(B):
        per_item = 0.0
        for h in range(H):
            for w in range(W):
                per_item += sum((zs[b][d][h][w] - zt[b][d][h][w]) ** 2 for d in range(D))
        total += per_item / (H * W)
    return total / B


def hsic_cka(X, Y):
    """Linear CKA through explicit Gram matrices and the centring matrix."""
    m = len(X)
    K = [[sum(a * b for a, b in zip(X[i], X[j])) for j in range(m)] for i in range(m)]
    L = [[sum(a * b for a, b in zip(Y[i], Y[j])) for j in range(m)] for i in range(m)]
    Hm = [[(1.0 if i == j else 0.0) - 1.0 / m for j in range(m)] for i in range(m)]

    def matmul(A, B):
        return [[sum(A[i][k] * B[k][j] for k in range(m)) for j in range(m)] for i in range(m)]

    def hsic(A, B):
        KH = matmul(matmul(Hm, A), Hm)
        LH = matmul(matmul(Hm, B), Hm)
        return sum(KH[i][j] * LH[j][i] for i in range(m) for j in range(m))

    return hsic(K, L) / math.sqrt(hsic(K, K) * hsic(L, L))
