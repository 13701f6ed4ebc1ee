"""Pure numpy implementations of the left-to-right HMM kernels.

These mirror ``_kernels.pyx`` one to one and are used when the compiled
extension is unavailable (or when ``SIGNTIE_PURE_PYTHON=1``).  All arrays are
float64 log-probabilities; ``-inf`` marks unreachable states.

Tie rule shared with the compiled kernels: a state keeps its self-loop
predecessor unless the forward (or entry) predecessor is strictly better.
"""

import numpy as np

NEG_INF = -np.inf


def viterbi_lr(emis, log_self, log_fwd):
    """Best path through a no-skip left-to-right chain.

    The path starts in state 0 at the first frame and ends in the last state
    at the last frame.  Returns ``(score, path)``; ``score`` is ``-inf`` and
    ``path`` is empty when the chain cannot be traversed in ``T`` frames.
    """
    emis = np.asarray(emis, dtype=np.float64)
    T, N = emis.shape
    if T < N or N == 0:
        return NEG_INF, np.zeros(0, dtype=np.int64)
    score = np.full(N, NEG_INF)
    score[0] = emis[0, 0]
    moved = np.zeros((T, N), dtype=bool)
    for t in range(1, T):
        stay = score + log_self
        fwd = np.full(N, NEG_INF)
        fwd[1:] = score[:-1] + log_fwd[:-1]
        take = fwd > stay
        moved[t] = take
        score = np.where(take, fwd, stay) + emis[t]
    best = score[N - 1]
    if not np.isfinite(best):
        return NEG_INF, np.zeros(0, dtype=np.int64)
    path = np.empty(T, dtype=np.int64)
    j = N - 1
    for t in range(T - 1, -1, -1):
        path[t] = j
        if t > 0 and moved[t, j]:
            j -= 1
    return float(best), path


def viterbi_lr_batch(emis, n_states, log_self, log_fwd):
    """Viterbi scores for many padded chains at once.

    ``emis`` has shape ``(U, T, S)``; unit ``u`` uses its first
    ``n_states[u]`` columns.  Returns a ``(U,)`` array of scores.
    """
    emis = np.asarray(emis, dtype=np.float64)
    U, T, S = emis.shape
    n_states = np.asarray(n_states, dtype=np.int64)
    ls = np.asarray(log_self, dtype=np.float64)
    lf = np.asarray(log_fwd, dtype=np.float64)
    valid = np.arange(S)[None, :] < n_states[:, None]
    score = np.full((U, S), NEG_INF)
    score[:, 0] = emis[:, 0, 0]
    for t in range(1, T):
        stay = score + ls
        fwd = np.full((U, S), NEG_INF)
        fwd[:, 1:] = score[:, :-1] + lf[:, :-1]
        score = np.maximum(stay, fwd) + emis[:, t, :]
        score[~valid] = NEG_INF
    out = score[np.arange(U), n_states - 1]
    out[n_states > T] = NEG_INF
    return out


def forward_backward_lr(emis, log_self, log_fwd):
    """Forward-backward on a no-skip left-to-right chain.

    Returns ``(loglik, gamma, self_counts, fwd_counts)`` where ``gamma`` is the
    ``(T, N)`` state posterior and the count vectors hold the expected number
    of self-loop and forward transitions taken out of each state.
    """
    emis = np.asarray(emis, dtype=np.float64)
    T, N = emis.shape
    if T < N:
        return NEG_INF, np.zeros((T, N)), np.zeros(N), np.zeros(N)
    alpha = np.full((T, N), NEG_INF)
    alpha[0, 0] = emis[0, 0]
    for t in range(1, T):
        stay = alpha[t - 1] + log_self
        fwd = np.full(N, NEG_INF)
        fwd[1:] = alpha[t - 1, :-1] + log_fwd[:-1]
        alpha[t] = np.logaddexp(stay, fwd) + emis[t]
    beta = np.full((T, N), NEG_INF)
    beta[T - 1, N - 1] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emis[t + 1]
        b = nxt + log_self
        b[:-1] = np.logaddexp(b[:-1], nxt[1:] + log_fwd[:-1])
        beta[t] = b
    loglik = alpha[T - 1, N - 1]
    if not np.isfinite(loglik):
        return NEG_INF, np.zeros((T, N)), np.zeros(N), np.zeros(N)
    with np.errstate(invalid="ignore"):
        gamma = np.exp(alpha + beta - loglik)
    gamma = np.nan_to_num(gamma)
    nxt = beta[1:] + emis[1:]
    xs = np.exp(alpha[:-1] + log_self + nxt - loglik)
    xf = np.zeros((T - 1, N))
    xf[:, :-1] = np.exp(alpha[:-1, :-1] + log_fwd[:-1] + nxt[:, 1:] - loglik)
    self_counts = np.nan_to_num(xs).sum(axis=0)
    fwd_counts = np.nan_to_num(xf).sum(axis=0)
    return float(loglik), gamma, self_counts, fwd_counts


def lr_step(prev, prev_hist, entry, entry_hist, emis, log_self, log_fwd, n_states):
    """One time-synchronous update of a batch of padded chains.

    Parameters
    ----------
    prev, prev_hist : (U, S) scores and history ids at the previous frame.
    entry, entry_hist : (U,) score and history id offered to state 0.
    emis : (U, S) emission log-likelihoods at the current frame.

    Returns ``(score, hist, entered)`` where ``entered[u]`` is true when state
    0 of unit ``u`` took the entry token.
    """
    U, S = prev.shape
    stay = prev + log_self
    fwd = np.full((U, S), NEG_INF)
    fwd[:, 1:] = prev[:, :-1] + log_fwd[:, :-1]
    fwd[:, 0] = entry
    take = fwd > stay
    score = np.where(take, fwd, stay) + emis
    src_hist = np.empty_like(prev_hist)
    src_hist[:, 1:] = prev_hist[:, :-1]
    src_hist[:, 0] = entry_hist
    hist = np.where(take, src_hist, prev_hist)
    valid = np.arange(S)[None, :] < np.asarray(n_states)[:, None]
    score[~valid] = NEG_INF
    score[np.isnan(score)] = NEG_INF
    hist[~valid] = prev_hist[~valid]
    return score, hist, take[:, 0].copy()
