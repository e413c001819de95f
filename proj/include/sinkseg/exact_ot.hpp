#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "sinkseg/mat.hpp"
#include "sinkseg/sinkhorn.hpp"

namespace sinkseg {

// Exact (unregularized) optimal transport on tiny instances, used as a
// ground-truth reference for the entropic solver. Solved with the
// transportation simplex: northwest-corner start, tree duals, Bland's
// smallest-index pivoting so degenerate instances cannot cycle.

struct ExactOtResult {
    Mat plan;            // optimal vertex of the transport polytope
    double value = 0.0;  // <plan, cost>
    bool unique = true;  // margin > 1e-9: the returned vertex is the only
                         // optimal plan
    double margin = 0.0; // smallest nonbasic reduced cost at the optimum
                         // (+inf when every cell is basic); the entropic plan
                         // approaches the vertex like exp(-margin/epsilon)
};

namespace detail {

struct BasisCell {
    int i, j;
    double v;
};

} // namespace detail

inline ExactOtResult exact_ot(const Mat &cost, const Marginals &marg) {
    const int m = cost.rows, n = cost.cols;
    if (m * n > 64) throw SizeError("exact_ot: instance larger than 64 cells");
    if (!all_finite(cost)) throw std::invalid_argument("exact_ot: cost has non-finite entries");
    if (static_cast<int>(marg.mu.size()) != m || static_cast<int>(marg.nu.size()) != n)
        throw ShapeError("exact_ot: marginal lengths do not match cost shape");
    marg.validate();

    // Northwest-corner initial basis: exactly m + n - 1 cells, possibly with
    // degenerate zero allocations.
    std::vector<detail::BasisCell> basis;
    basis.reserve(static_cast<std::size_t>(m + n - 1));
    {
        std::vector<double> a = marg.mu, b = marg.nu;
        int i = 0, j = 0;
        while (true) {
            const double x = std::min(a[i], b[j]);
            basis.push_back({i, j, x});
            a[i] -= x;
            b[j] -= x;
            if (i == m - 1 && j == n - 1) break;
            if (i < m - 1 && (j == n - 1 || a[i] <= b[j]))
                ++i;
            else
                ++j;
        }
    }

    const double rc_tol = 1e-12;
    std::vector<double> u(m), v(n);
    std::vector<char> u_set(m), v_set(n);
    std::vector<int> in_basis(static_cast<std::size_t>(m) * n, -1);

    const int max_pivots = 1000 * (m + n);
    double margin = std::numeric_limits<double>::infinity();
    for (int pivot = 0;; ++pivot) {
        if (pivot > max_pivots) throw EvalError("exact_ot: pivot limit exceeded");

        std::fill(in_basis.begin(), in_basis.end(), -1);
        for (std::size_t k = 0; k < basis.size(); ++k)
            in_basis[static_cast<std::size_t>(basis[k].i) * n + basis[k].j] = static_cast<int>(k);

        // Duals u_i + v_j = C_ij on basic cells; the basis graph is a
        // spanning tree, so a BFS from row 0 settles every node.
        std::fill(u_set.begin(), u_set.end(), 0);
        std::fill(v_set.begin(), v_set.end(), 0);
        u[0] = 0.0;
        u_set[0] = 1;
        for (bool changed = true; changed;) {
            changed = false;
            for (const auto &c : basis) {
                if (u_set[c.i] && !v_set[c.j]) {
                    v[c.j] = cost(c.i, c.j) - u[c.i];
                    v_set[c.j] = 1;
                    changed = true;
                } else if (!u_set[c.i] && v_set[c.j]) {
                    u[c.i] = cost(c.i, c.j) - v[c.j];
                    u_set[c.i] = 1;
                    changed = true;
                }
            }
        }

        // Entering cell: smallest row-major index with negative reduced cost.
        // The margin scan is only complete on the final sweep, when no
        // entering cell cuts it short.
        int ei = -1, ej = -1;
        margin = std::numeric_limits<double>::infinity();
        for (int i = 0; i < m && ei < 0; ++i) {
            for (int j = 0; j < n; ++j) {
                if (in_basis[static_cast<std::size_t>(i) * n + j] >= 0) continue;
                const double rc = cost(i, j) - u[i] - v[j];
                if (rc < -rc_tol) {
                    ei = i;
                    ej = j;
                    break;
                }
                margin = std::min(margin, rc);
            }
        }
        if (ei < 0) break;  // all reduced costs nonnegative: optimal

        // The basis tree plus the entering edge closes exactly one cycle.
        // Nodes 0..m-1 are rows, m..m+n-1 are columns.
        std::vector<int> parent_node(static_cast<std::size_t>(m) + n, -1);
        std::vector<int> parent_edge(static_cast<std::size_t>(m) + n, -1);
        std::vector<int> queue{ei};
        std::vector<char> seen(static_cast<std::size_t>(m) + n, 0);
        seen[static_cast<std::size_t>(ei)] = 1;
        for (std::size_t q = 0; q < queue.size(); ++q) {
            const int node = queue[q];
            for (std::size_t k = 0; k < basis.size(); ++k) {
                const int a = basis[k].i, b = m + basis[k].j;
                int next = -1;
                if (a == node) next = b;
                else if (b == node) next = a;
                if (next < 0 || seen[static_cast<std::size_t>(next)]) continue;
                seen[static_cast<std::size_t>(next)] = 1;
                parent_node[static_cast<std::size_t>(next)] = node;
                parent_edge[static_cast<std::size_t>(next)] = static_cast<int>(k);
                queue.push_back(next);
            }
        }

        // Walk back from the entering column to the entering row; edges at
        // odd positions in the cycle (starting after the entering cell) give
        // up mass.
        std::vector<int> minus_cells, plus_cells;
        int node = m + ej;
        bool minus = true;
        while (node != ei) {
            const int k = parent_edge[static_cast<std::size_t>(node)];
            (minus ? minus_cells : plus_cells).push_back(k);
            node = parent_node[static_cast<std::size_t>(node)];
            minus = !minus;
        }

        // theta = min mass over the giving cells; ties resolved by smallest
        // row-major index (Bland again).
        double theta = std::numeric_limits<double>::infinity();
        for (int k : minus_cells) theta = std::min(theta, basis[static_cast<std::size_t>(k)].v);
        int leave = -1;
        for (int k : minus_cells) {
            const auto &c = basis[static_cast<std::size_t>(k)];
            if (c.v > theta) continue;
            if (leave < 0 || c.i * n + c.j < basis[static_cast<std::size_t>(leave)].i * n +
                                                 basis[static_cast<std::size_t>(leave)].j)
                leave = k;
        }

        for (int k : minus_cells) basis[static_cast<std::size_t>(k)].v -= theta;
        for (int k : plus_cells) basis[static_cast<std::size_t>(k)].v += theta;
        basis[static_cast<std::size_t>(leave)] = {ei, ej, theta};
    }

    ExactOtResult out;
    out.plan = Mat(m, n);
    out.value = 0.0;
    for (const auto &c : basis) {
        out.plan(c.i, c.j) = c.v;
        out.value += c.v * cost(c.i, c.j);
    }
    // If every nonbasic reduced cost is strictly positive, optimal plans must
    // be supported on the basis tree, and a tree support pins the allocation
    // uniquely. Basis degeneracy does not matter for plan uniqueness.
    out.margin = margin;
    out.unique = margin > 1e-9;
    return out;
}

} // namespace sinkseg
