"""Layer-wise neuron matching and averaging for federated model fusion.

Hidden neurons from different clients are treated as exchangeable: each one
is summarized by a vector of its input weights and biases, vectors are
assigned to columns of a shared global pool by solving a sequence of
rectangular assignment problems, and the global layer is the ownership
weighted average of the aligned client layers.  Recurrent weights do not
take part in the assignment itself; they are permuted to the global layout
afterwards and averaged pairwise.
"""

from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass
class MatchConfig:
    """Knobs for the matching cost and the sweep schedule.

    sigma_sq is the observation noise of a neuron vector around its global
    column, sigma0_sq the prior spread of the columns themselves.  kappa
    prices the creation of column i at kappa * ln(i) on top of eps, which
    is eps_scale times the median cost of reusing an existing column.
    """

    sigma_sq: float = 1.0
    sigma0_sq: float = 10.0
    kappa: float = 1.0
    eps_scale: float = 1.0
    passes: int = 2
    avg_mode: str = "per_match"


def weighted_sum(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Reduce a (J, ...) stack with broadcastable weights.

    Every averaging path in the package funnels through this one expression
    so that configurations which are mathematically identical (for example
    uniform matched averaging with identity alignments versus plain
    weighted averaging) also agree bitwise.
    """
    return (stack * weights).sum(axis=0)


def extract_neuron_vectors(layer: nn.LstmLayerParams) -> np.ndarray:
    """Per-neuron signature rows, shape (hidden, 4 * d_in + 4).

    Each row concatenates the neuron's four gate input-weight rows with its
    four combined biases.  Recurrent weights are excluded: their row and
    column order both depend on the alignment being solved for.
    """
    hidden, d_in = layer.hidden, layer.d_in
    gates = layer.w_ih.reshape(nn.N_GATES, hidden, d_in)
    flat = gates.transpose(1, 0, 2).reshape(hidden, nn.N_GATES * d_in)
    bias = (layer.b_ih + layer.b_hh).reshape(nn.N_GATES, hidden).T
    return np.concatenate([flat, bias], axis=1)


def hungarian_solve(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of n rows to n of m columns, n <= m.

    Shortest-augmenting-path algorithm with dual potentials.  Returns the
    chosen column index for every row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    n, m = cost.shape
    if n > m:
        raise ValueError(f"cost has more rows ({n}) than columns ({m})")
    if n and not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")
    if n == 0:
        return np.empty(0, dtype=np.intp)

    # 1-based arrays; column 0 is a virtual root for the augmenting search
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of = np.zeros(m + 1, dtype=np.intp)
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            cols = np.nonzero(~used[1:])[0] + 1
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols] = np.where(better, cur, minv[cols])
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            seen = np.nonzero(used)[0]
            u[row_of[seen]] += delta
            v[seen] -= delta
            minv[cols] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1

    assign = np.empty(n, dtype=np.intp)
    for j in range(1, m + 1):
        if row_of[j] > 0:
            assign[row_of[j] - 1] = j - 1
    return assign


def match_cost(vectors: np.ndarray, thetas: np.ndarray, counts: np.ndarray,
               cfg: MatchConfig) -> np.ndarray:
    """Assignment cost of each neuron vector against pool columns.

    Shape (L_j, L_pool + L_j): reuse costs first, then one column per
    potential new global neuron.  Reuse cost is the squared distance to the
    column mean, attenuated by how many vectors already back that column;
    creating global column i costs eps + kappa * ln(i) with i counted
    1-based across the whole pool.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    l_client = vectors.shape[0]
    l_pool = thetas.shape[0]
    denom = cfg.sigma_sq + cfg.sigma0_sq / (
        1.0 + counts * cfg.sigma0_sq / cfg.sigma_sq)
    diff = vectors[:, None, :] - thetas[None, :, :]
    existing = (diff * diff).sum(axis=2) / denom[None, :]
    eps = cfg.eps_scale * float(np.median(existing)) if l_pool else 0.0
    new_index = np.arange(l_pool + 1, l_pool + l_client + 1, dtype=np.float64)
    new_cost = eps + cfg.kappa * np.log(new_index)
    return np.concatenate(
        [existing, np.broadcast_to(new_cost, (l_client, l_client))], axis=1)


class GlobalNeuronPool:
    """Running sums and backing counts of the matched global columns."""

    def __init__(self, width: int):
        self.width = width
        self.sums = np.zeros((0, width))
        self.counts = np.zeros(0, dtype=np.intp)

    @property
    def size(self) -> int:
        return self.counts.size

    @property
    def thetas(self) -> np.ndarray:
        return self.sums / self.counts[:, None]

    def admit(self, vectors: np.ndarray, ext_cols: np.ndarray) -> np.ndarray:
        """Fold a client in under an extended-matrix assignment.

        ext_cols indexes the matrix produced by match_cost: values below the
        current pool size reuse that column, the rest create columns, which
        are appended in ascending extended-index order.  Returns the final
        global column of every client neuron.
        """
        ext_cols = np.asarray(ext_cols, dtype=np.intp)
        l_pool = self.size
        final = np.empty(ext_cols.size, dtype=np.intp)
        reused = ext_cols < l_pool
        final[reused] = ext_cols[reused]
        fresh = np.nonzero(~reused)[0]
        order = fresh[np.argsort(ext_cols[fresh], kind="stable")]
        final[order] = l_pool + np.arange(order.size)
        if order.size:
            self.sums = np.concatenate(
                [self.sums, np.zeros((order.size, self.width))])
            self.counts = np.concatenate(
                [self.counts, np.zeros(order.size, dtype=np.intp)])
        self.sums[final] += vectors
        self.counts[final] += 1
        return final

    def remove(self, vectors: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Withdraw a client's vectors and compact empty columns.

        Returns an index map from old to new column numbers, -1 where the
        column vanished; callers must push it through every assignment they
        are holding.
        """
        cols = np.asarray(cols, dtype=np.intp)
        self.sums[cols] -= vectors
        self.counts[cols] -= 1
        if np.any(self.counts < 0):
            raise ValueError("column count went negative on removal")
        keep = self.counts > 0
        index_map = np.full(self.size, -1, dtype=np.intp)
        index_map[keep] = np.arange(int(keep.sum()))
        self.sums = self.sums[keep]
        self.counts = self.counts[keep]
        return index_map


def bbp_map_match(client_vectors: list, cfg: MatchConfig | None = None,
                  seed: int = 0) -> tuple:
    """Iteratively match every client's neurons into a shared pool.

    Clients are visited in random order; a revisited client is first
    withdrawn from the pool so its neurons can be reassigned against the
    state built from everyone else.  Sweeps stop early once a full pass
    leaves all assignments unchanged.  Returns (assignments, pool).
    """
    cfg = cfg or MatchConfig()
    if not client_vectors:
        raise ValueError("need at least one client")
    widths = {v.shape[1] for v in client_vectors}
    if len(widths) != 1:
        raise ValueError(f"neuron vector widths differ: {sorted(widths)}")
    rng = np.random.default_rng(seed)
    pool = GlobalNeuronPool(widths.pop())
    n_clients = len(client_vectors)
    assignments = [None] * n_clients
    for _ in range(max(1, cfg.passes)):
        changed = False
        for j in rng.permutation(n_clients):
            vectors = client_vectors[j]
            if assignments[j] is not None:
                index_map = pool.remove(vectors, assignments[j])
                for k in range(n_clients):
                    if k != j and assignments[k] is not None:
                        assignments[k] = index_map[assignments[k]]
            ext = hungarian_solve(
                match_cost(vectors, pool.thetas, pool.counts, cfg))
            fresh = pool.admit(vectors, ext)
            if assignments[j] is None or not np.array_equal(fresh, assignments[j]):
                changed = True
            assignments[j] = fresh
        if not changed:
            break
    return assignments, pool


def scatter_layer(layer: nn.LstmLayerParams, assignment: np.ndarray,
                  global_size: int) -> tuple:
    """Embed a client layer into the global layout.

    Returns (layer', mask) where layer' has global_size neurons, zeros at
    positions the client does not own, and mask flags the owned positions.
    """
    assignment = np.asarray(assignment, dtype=np.intp)
    hidden, d_in = layer.hidden, layer.d_in
    if assignment.size != hidden:
        raise ValueError("assignment length does not match layer width")

    w4 = layer.w_ih.reshape(nn.N_GATES, hidden, d_in)
    new_w = np.zeros((nn.N_GATES, global_size, d_in))
    new_w[:, assignment, :] = w4

    h4 = layer.w_hh.reshape(nn.N_GATES, hidden, hidden)
    new_h = np.zeros((nn.N_GATES, global_size, global_size))
    new_h[:, assignment[:, None], assignment[None, :]] = h4

    def spread(bias):
        b4 = bias.reshape(nn.N_GATES, hidden)
        out = np.zeros((nn.N_GATES, global_size))
        out[:, assignment] = b4
        return out.reshape(-1)

    mask = np.zeros(global_size, dtype=bool)
    mask[assignment] = True
    scattered = nn.LstmLayerParams(
        w_ih=new_w.reshape(nn.N_GATES * global_size, d_in),
        w_hh=new_h.reshape(nn.N_GATES * global_size, global_size),
        b_ih=spread(layer.b_ih),
        b_hh=spread(layer.b_hh))
    return scattered, mask


def matched_average_layer(scattered: list, masks: list,
                          mode: str = "per_match") -> nn.LstmLayerParams:
    """Average aligned client layers into one global layer.

    per_match weights each global neuron by the clients that actually own
    it (recurrent entries by joint ownership of both endpoints); uniform
    weights every client 1/J regardless, zeros included.
    """
    n_clients = len(scattered)
    mask_stack = np.stack(masks).astype(np.float64)
    global_size = mask_stack.shape[1]
    if mode == "uniform":
        neuron_w = np.full((n_clients, global_size), 1.0 / n_clients)
        pair_w = np.full((n_clients, global_size, global_size), 1.0 / n_clients)
    elif mode == "per_match":
        counts = mask_stack.sum(axis=0)
        if np.any(counts == 0):
            raise ValueError("global neuron owned by no client")
        neuron_w = mask_stack / counts
        pair_stack = mask_stack[:, :, None] * mask_stack[:, None, :]
        pair_w = pair_stack / np.maximum(pair_stack.sum(axis=0), 1.0)
    else:
        raise ValueError(f"unknown averaging mode {mode!r}")

    row_w = np.tile(neuron_w, (1, nn.N_GATES))
    return nn.LstmLayerParams(
        w_ih=weighted_sum(np.stack([s.w_ih for s in scattered]),
                          row_w[:, :, None]),
        w_hh=weighted_sum(np.stack([s.w_hh for s in scattered]),
                          np.tile(pair_w, (1, nn.N_GATES, 1))),
        b_ih=weighted_sum(np.stack([s.b_ih for s in scattered]), row_w),
        b_hh=weighted_sum(np.stack([s.b_hh for s in scattered]), row_w))


def average_output_layer(dense_layers: list, assignments: list,
                         global_size: int, mode: str = "per_match") -> nn.DenseLayerParams:
    """Combine client output heads over the global hidden layout.

    A head still at its local width is scattered through the client's
    assignment first; a head already at global width is taken as is.
    Column ownership always comes from the assignments.  The bias is the
    plain mean over clients.
    """
    n_clients = len(dense_layers)
    ws, masks = [], []
    for dense, assignment in zip(dense_layers, assignments):
        assignment = np.asarray(assignment, dtype=np.intp)
        mask = np.zeros(global_size, dtype=bool)
        mask[assignment] = True
        if dense.w.shape[1] == global_size:
            ws.append(dense.w[0])
        elif dense.w.shape[1] == assignment.size:
            wide = np.zeros(global_size)
            wide[assignment] = dense.w[0]
            ws.append(wide)
        else:
            raise ValueError("output head width matches neither the client "
                             "nor the global layer")
        masks.append(mask)

    mask_stack = np.stack(masks).astype(np.float64)
    if mode == "uniform":
        col_w = np.full((n_clients, global_size), 1.0 / n_clients)
    elif mode == "per_match":
        counts = mask_stack.sum(axis=0)
        if np.any(counts == 0):
            raise ValueError("global neuron owned by no client")
        col_w = mask_stack / counts
    else:
        raise ValueError(f"unknown averaging mode {mode!r}")

    w = weighted_sum(np.stack(ws), col_w)[None, :]
    b = weighted_sum(np.stack([d.b for d in dense_layers]),
                     np.full((n_clients, 1), 1.0 / n_clients))
    return nn.DenseLayerParams(w=w, b=b)


def apply_hidden_permutation(model: nn.ModelParams,
                             perm: np.ndarray) -> nn.ModelParams:
    """Reorder a model's hidden neurons; predictions are unchanged."""
    perm = np.asarray(perm, dtype=np.intp)
    hidden = model.lstm.hidden
    if sorted(perm.tolist()) != list(range(hidden)):
        raise ValueError("perm must be a permutation of the hidden units")
    w4 = model.lstm.w_ih.reshape(nn.N_GATES, hidden, -1)[:, perm, :]
    h4 = model.lstm.w_hh.reshape(nn.N_GATES, hidden, hidden)[:, perm[:, None], perm[None, :]]
    b_ih = model.lstm.b_ih.reshape(nn.N_GATES, hidden)[:, perm].reshape(-1)
    b_hh = model.lstm.b_hh.reshape(nn.N_GATES, hidden)[:, perm].reshape(-1)
    lstm = nn.LstmLayerParams(w_ih=w4.reshape(model.lstm.w_ih.shape),
                              w_hh=h4.reshape(model.lstm.w_hh.shape),
                              b_ih=b_ih, b_hh=b_hh)
    dense = nn.DenseLayerParams(w=model.dense.w[:, perm].copy(),
                                b=model.dense.b.copy())
    meta = nn.ModelMeta(model.meta.d_in, hidden, model.meta.seq_len)
    return nn.ModelParams(meta=meta, lstm=lstm, dense=dense)
