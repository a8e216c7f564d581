"""Multiple-hypothesis bookkeeping for centerline tracking.

A branch is explored as a tree of template fits.  Each node carries the
per-step score assigned when it was attached; a path is judged by the
mean of its most recent ``depth`` scores (its search window).  One node
is committed per step once the window is full: the first step of the
best full-window path.  Subtrees that do not descend from the committed
node are discarded, which is how decisions stay deferred for ``depth``
steps without unbounded growth.

Scores can be rank-normalized per step (best hypothesis 1, second 1/2,
third 1/3, ...) which makes the window mean scale-free, or left raw.
This module is geometry-agnostic: nodes may carry a fit or plain
numbers, so the search mechanics can be tested against brute force.
"""

from __future__ import annotations

import numpy as np

from .fitting import fit_from_dict, fit_to_dict


def rank_scores(raw):
    """Rank-normalize scores: sorted descending, the i-th best maps to
    1/(i+1).  Ties keep input order (stable sort), so the earlier entry
    gets the better rank.

    Parameters
    ----------
    raw : array-like of float

    Returns
    -------
    ndarray with values {1, 1/2, ..., 1/n} permuted to input order.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1:
        raise ValueError("expected a 1-d score array")
    order = np.argsort(-raw, kind="stable")
    out = np.empty(raw.shape)
    out[order] = 1.0 / (np.arange(raw.size) + 1.0)
    return out


class HypothesisNode:
    """One tracking step in the search tree."""

    __slots__ = ("id", "parent", "children", "depth", "score", "raw",
                 "fit", "key", "committed")

    def __init__(self, node_id, parent, score, raw, fit=None, key=None):
        self.id = node_id
        self.parent = parent
        self.children = []
        self.depth = 0 if parent is None else parent.depth + 1
        self.score = score
        self.raw = raw
        self.fit = fit
        self.key = key
        self.committed = False

    def path_scores(self, depth):
        """Scores of the last ``depth`` steps ending at this node,
        oldest first.  The root anchor carries no score."""
        out = []
        node = self
        while node is not None and node.score is not None \
                and len(out) < depth:
            out.append(node.score)
            node = node.parent
        out.reverse()
        return out

    def window_mean(self, depth):
        scores = self.path_scores(depth)
        if not scores:
            return 0.0
        return float(sum(scores) / len(scores))


class HypothesisTree:
    """Search tree over tracking hypotheses for one branch.

    The ``anchor`` is the most recently committed node (initially a
    scoreless root for the seed); the ``frontier`` holds the current
    leaves, all at equal depth, in insertion order.  Insertion order
    breaks all ties, which keeps runs bit-reproducible.
    """

    def __init__(self):
        self._next_id = 0
        self.anchor = self._make(None, None, None)
        self.frontier = [self.anchor]
        self.nodes_created = 1
        self.cap_hits = 0
        self.max_frontier = 1

    def _make(self, parent, score, raw, fit=None, key=None):
        node = HypothesisNode(self._next_id, parent, score, raw, fit, key)
        self._next_id += 1
        return node

    def add_child(self, parent, score, raw=None, fit=None, key=None):
        node = self._make(parent, score, raw, fit, key)
        parent.children.append(node)
        self.nodes_created += 1
        return node

    def set_frontier(self, nodes):
        self.frontier = list(nodes)
        self.max_frontier = max(self.max_frontier, len(self.frontier))

    def pending_depth(self):
        """Steps accumulated past the anchor."""
        if not self.frontier:
            return 0
        return self.frontier[0].depth - self.anchor.depth

    # -- pruning --------------------------------------------------------

    def prune_threshold(self, threshold, depth):
        """Drop frontier leaves whose window mean is strictly below the
        threshold.  Only meaningful once windows are full; the caller
        guards the startup phase."""
        kept = [n for n in self.frontier
                if n.window_mean(depth) >= threshold]
        removed = len(self.frontier) - len(kept)
        self._replace_frontier(kept)
        return removed

    def prune_startup(self, threshold, depth, best_step_score=1.0):
        """Optimistic-completion prune during startup.  A leaf whose
        partial sum cannot reach the threshold even if every remaining
        step scored ``best_step_score`` is removed; this never removes a
        path that could have survived the first full-window prune."""
        kept = []
        for n in self.frontier:
            scores = n.path_scores(depth)
            missing = depth - len(scores)
            optimistic = (sum(scores) + missing * best_step_score) / depth
            if optimistic >= threshold:
                kept.append(n)
        removed = len(self.frontier) - len(kept)
        self._replace_frontier(kept)
        return removed

    def merge_dominated(self, depth):
        """Merge frontier leaves that share the same hypothesis key.

        If two leaves end in the same hypothesis, their futures are
        identical; one can be dropped if every suffix sum of its path
        scores is no better than the other's, because then it loses (or
        ties) every future window comparison.  Ties resolve in favor of
        the earlier leaf."""
        by_key = {}
        for i, n in enumerate(self.frontier):
            if n.key is not None:
                by_key.setdefault(n.key, []).append(i)
        drop = set()
        for idxs in by_key.values():
            if len(idxs) < 2:
                continue
            suffixes = {i: _suffix_sums(self.frontier[i], depth)
                        for i in idxs}
            for a in idxs:
                if a in drop:
                    continue
                for b in idxs:
                    if b == a or b in drop:
                        continue
                    if _dominates(suffixes[a], suffixes[b],
                                  tie_wins=a < b):
                        drop.add(b)
        if drop:
            kept = [n for i, n in enumerate(self.frontier)
                    if i not in drop]
            self._replace_frontier(kept)
        return len(drop)

    def apply_cap(self, cap, depth):
        """Hard safety cap on frontier width; keeps the best ``cap``
        leaves by window mean (insertion order among kept)."""
        if len(self.frontier) <= cap:
            return 0
        self.cap_hits += 1
        means = np.array([n.window_mean(depth) for n in self.frontier])
        order = np.argsort(-means, kind="stable")[:cap]
        keep = np.zeros(len(self.frontier), dtype=bool)
        keep[order] = True
        kept = [n for i, n in enumerate(self.frontier) if keep[i]]
        removed = len(self.frontier) - len(kept)
        self._replace_frontier(kept)
        return removed

    def _replace_frontier(self, kept):
        kept_ids = {id(n) for n in kept}
        for n in self.frontier:
            if id(n) not in kept_ids:
                _detach(n)
        self.frontier = kept

    # -- committing -----------------------------------------------------

    def best_leaf(self, depth):
        if not self.frontier:
            return None
        best = self.frontier[0]
        best_mean = best.window_mean(depth)
        for n in self.frontier[1:]:
            mean = n.window_mean(depth)
            if mean > best_mean:
                best, best_mean = n, mean
        return best

    def commit_best(self, depth):
        """Commit the first pending step of the best full-window path.

        Exact window-mean ties go to the leaf whose anchor-adjacent
        ancestor has the larger fit raw score; remaining ties keep
        insertion order.  Returns the newly committed node; all
        subtrees not descending from it are discarded."""
        if not self.frontier:
            return None
        best_step = None
        best_key = None
        for n in self.frontier:
            mean = n.window_mean(depth)
            step = n
            while step.parent is not self.anchor:
                step = step.parent
            anc_raw = step.fit.raw_score if step.fit is not None else \
                (step.raw if step.raw is not None else 0.0)
            key = (mean, anc_raw)
            if best_key is None or key > best_key:
                best_key = key
                best_step = step
        return self.commit_node(best_step)

    def commit_node(self, step):
        """Make ``step`` (a child of the current anchor) the new anchor
        and drop everything that does not descend from it."""
        if step.parent is not self.anchor:
            raise ValueError("can only commit a child of the anchor")
        for sibling in list(self.anchor.children):
            if sibling is not step:
                sibling.parent = None
                self.anchor.children.remove(sibling)
        step.committed = True
        self.anchor = step
        kept = [n for n in self.frontier if _descends(n, step)]
        self.frontier = kept
        return step

    def flush_best(self, depth, frontier=None):
        """Path of pending nodes, anchor-exclusive, ending at the best
        leaf; used when a branch terminates with steps still pending."""
        leaves = self.frontier if frontier is None else list(frontier)
        if not leaves:
            return []
        best, best_mean = leaves[0], leaves[0].window_mean(depth)
        for n in leaves[1:]:
            mean = n.window_mean(depth)
            if mean > best_mean:
                best, best_mean = n, mean
        chain = []
        node = best
        while node is not None and not node.committed \
                and node.score is not None:
            chain.append(node)
            node = node.parent
        chain.reverse()
        return chain

    def split_off(self, node, leaves):
        """New tree continuing from ``node`` with only the pending
        subtree leading to ``leaves``.

        The clone's anchor keeps a parent link into this tree's
        committed chain, so window means still see the shared history;
        the pending nodes are copied so sibling trees can prune
        independently.  Node identity is new, scores and fits are
        shared by reference.
        """
        tree = HypothesisTree.__new__(HypothesisTree)
        tree._next_id = 0
        tree.cap_hits = 0
        tree.nodes_created = 0

        def clone(orig, parent):
            c = tree._make(parent, orig.score, orig.raw, orig.fit,
                           orig.key)
            tree.nodes_created += 1
            if parent is not None:
                parent.children.append(c)
            return c

        anchor = clone(node, None)
        anchor.parent = node.parent
        anchor.depth = node.depth
        anchor.committed = True
        keep = set()
        for leaf in leaves:
            cur = leaf
            while cur is not node:
                keep.add(id(cur))
                cur = cur.parent
        clones = {id(node): anchor}
        frontier_map = {}

        def walk(orig):
            for ch in orig.children:
                if id(ch) in keep:
                    c = clone(ch, clones[id(orig)])
                    clones[id(ch)] = c
                    frontier_map[id(ch)] = c
                    walk(ch)

        walk(node)
        tree.anchor = anchor
        tree.frontier = [frontier_map[id(leaf)] for leaf in leaves]
        tree.max_frontier = len(tree.frontier)
        return tree

    def rerank_pending(self):
        """Recompute rank scores of the pending nodes level by level.

        After ``split_off`` the cloned chains still carry ranks earned
        against the full pre-split pool; chains that lost only to the
        other cluster are understated.  Each pending depth is re-ranked
        against the raw scores of the nodes actually kept, so the best
        surviving hypothesis per step scores 1 again.  Nodes without a
        raw score keep their old rank.
        """
        levels = {}
        stack = list(self.anchor.children)
        while stack:
            node = stack.pop()
            levels.setdefault(node.depth, []).append(node)
            stack.extend(node.children)
        for nodes in levels.values():
            nodes.sort(key=lambda n: n.id)
            if any(n.raw is None for n in nodes):
                continue
            for node, s in zip(nodes, rank_scores([n.raw for n in nodes])):
                node.score = float(s)

    # -- audits ---------------------------------------------------------

    def live_nodes(self):
        """Nodes reachable from the committed chain, including pending
        subtrees."""
        top = self.anchor
        while top.parent is not None:
            top = top.parent
        out = []
        stack = [top]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(node.children)
        return out

    # -- serialization --------------------------------------------------

    def to_dict(self):
        nodes = []
        for n in sorted(self.live_nodes(), key=lambda n: n.id):
            rec = {
                "id": n.id,
                "parent": None if n.parent is None else n.parent.id,
                "score": n.score,
                "raw": n.raw,
                "committed": n.committed,
            }
            if n.key is not None:
                rec["key"] = list(n.key)
            if n.fit is not None:
                rec["fit"] = fit_to_dict(n.fit)
            nodes.append(rec)
        return {
            "nodes": nodes,
            "anchor": self.anchor.id,
            "frontier": [n.id for n in self.frontier],
        }

    @classmethod
    def from_dict(cls, data):
        tree = cls.__new__(cls)
        tree.cap_hits = 0
        tree.max_frontier = 0
        by_id = {}
        for rec in data["nodes"]:
            parent = by_id[rec["parent"]] if rec["parent"] is not None \
                else None
            node = HypothesisNode(
                rec["id"], parent, rec["score"], rec["raw"],
                fit=fit_from_dict(rec["fit"]) if "fit" in rec else None,
                key=tuple(rec["key"]) if "key" in rec else None)
            node.committed = rec["committed"]
            if parent is not None:
                parent.children.append(node)
            by_id[rec["id"]] = node
        tree.anchor = by_id[data["anchor"]]
        tree.frontier = [by_id[i] for i in data["frontier"]]
        tree.nodes_created = len(by_id)
        tree._next_id = max(by_id) + 1 if by_id else 0
        tree.max_frontier = len(tree.frontier)
        return tree


def _suffix_sums(node, depth):
    """Sums of the last 1, 2, ..., depth-1 scores of a path."""
    scores = node.path_scores(depth)
    out = []
    acc = 0.0
    for i in range(1, depth):
        if i <= len(scores):
            acc += scores[-i]
        out.append(acc)
    return out


def _dominates(a, b, tie_wins):
    """True if suffix sums ``a`` beat (or, when ``tie_wins``, tie) the
    suffix sums ``b`` elementwise."""
    ge = all(x >= y for x, y in zip(a, b))
    if not ge:
        return False
    if any(x > y for x, y in zip(a, b)):
        return True
    return tie_wins


def _descends(node, ancestor):
    while node is not None:
        if node is ancestor:
            return True
        node = node.parent
    return False


def _detach(node):
    if node.parent is not None and node in node.parent.children:
        node.parent.children.remove(node)
        node.parent = None
