"""Independent scalar reference implementations used as test oracles.

Plain Python loops over lists and ``math``; nothing here imports the package.
"""

import math


def dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def matmul(A, B):
    n, k, m = len(A), len(B), len(B[0])
    return [[sum(A[i][t] * B[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def _term(num_logit, den_logits):
    # -log(exp(num) / sum exp(den)) with the max pulled out by hand
    top = max(den_logits)
    return -(num_logit - top - math.log(sum(math.exp(x - top) for x in den_logits)))


def contrastive(anchor, other, labels, tau, positives=None):
    """Mean over anchors with positives of the averaged -log ratio.

    Similarity of anchor i to member a is ``anchor[i] . other[a] / tau``.
    ``positives`` overrides the label-based positive sets.
    """
    n = len(anchor)
    total, used, per = 0.0, 0, []
    for i in range(n):
        A = [a for a in range(n) if a != i]
        P = positives[i] if positives is not None else [p for p in A if labels[p] == labels[i]]
        if not P:
            per.append(0.0)
            continue
        den = [dot(anchor[i], other[a]) / tau for a in A]
        s = sum(_term(dot(anchor[i], other[p]) / tau, den) for p in P) / len(P)
        per.append(s)
        total += s
        used += 1
    return (total / used if used else 0.0), per


def loss_self(Z, pairing, tau):
    return contrastive(Z, Z, None, tau, positives=[[pairing[i]] for i in range(len(Z))])[0]


def loss_sup(Z, labels, tau):
    return contrastive(Z, Z, labels, tau)[0]


def loss_z(Z, T, labels, tau):
    # anchor z_i, members theta*_a
    return contrastive(Z, T, labels, tau)[0]


def loss_theta(Z, T, labels, tau):
    # anchor theta*_i, members z_a
    return contrastive(T, Z, labels, tau)[0]


def loss_ce_modified(Z, Theta, labels):
    n = len(Z)
    total = 0.0
    for i in range(n):
        logits = [dot(Theta[i][k], Z[i]) for k in range(len(Theta[i]))]
        total += _term(logits[labels[i]], logits)
    return total / n


def mutual_information(P):
    """Direct enumeration of sum p log(p / (px py))."""
    n, m = len(P), len(P[0])
    px = [sum(P[i][j] for j in range(m)) for i in range(n)]
    py = [sum(P[i][j] for i in range(n)) for j in range(m)]
    mi = 0.0
    for i in range(n):
        for j in range(m):
            if P[i][j] > 0:
                mi += P[i][j] * math.log(P[i][j] / (px[i] * py[j]))
    return mi


def bound_report(Z, T, labels):
    """Enumerate the joint built from phi, then MI, epsilon, L_dual (tau = 1)."""
    n = len(Z)
    phi = [[(math.exp(dot(T[i], Z[j])) + math.exp(dot(T[j], Z[i]))) / 2 for j in range(n)] for i in range(n)]
    P = [[phi[i][j] / sum(phi[i]) / n for j in range(n)] for i in range(n)]
    mi = mutual_information(P)
    eps = min(P[i][i] for i in range(n))
    l_dual = loss_z(Z, T, labels, 1.0) + loss_theta(Z, T, labels, 1.0)
    rhs = math.log(n) - eps * l_dual
    return {"mi": mi, "epsilon": eps, "l_dual": l_dual, "rhs": rhs, "slack": mi - rhs, "joint": P}


def adamw_scalar(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * (mhat / (math.sqrt(vhat) + eps) + wd * p)
    return p


def unit_rows(rng, n, d):
    out = []
    for _ in range(n):
        v = rng.normal(size=d)
        out.append(list(v / math.sqrt(float(v @ v))))
    return out
