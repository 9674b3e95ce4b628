#pragma once

// Exact discrete optimal transport: transportation simplex (MODI potentials on a
// spanning-tree basis, block pricing) and a shortest-augmenting-path assignment solver.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "wassoed/error.hpp"
#include "wassoed/linalg.hpp"

namespace wassoed {

struct CouplingEntry {
    Eigen::Index row;
    Eigen::Index col;
    double mass;
};

/// Sparse transport plan between a source with `rows` atoms and a target with `cols` atoms.
struct CouplingPlan {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::vector<CouplingEntry> entries;

    Matrix dense() const {
        Matrix g = Matrix::Zero(rows, cols);
        for (const auto& e : entries) g(e.row, e.col) += e.mass;
        return g;
    }
    Vector row_sums() const {
        Vector s = Vector::Zero(rows);
        for (const auto& e : entries) s(e.row) += e.mass;
        return s;
    }
    Vector col_sums() const {
        Vector s = Vector::Zero(cols);
        for (const auto& e : entries) s(e.col) += e.mass;
        return s;
    }
    /// Feasibility for Gamma(a, b) within `tol` on every marginal.
    bool feasible(const Vector& a, const Vector& b, double tol = 1e-9) const {
        for (const auto& e : entries)
            if (e.mass < -tol) return false;
        return (row_sums() - a).cwiseAbs().maxCoeff() <= tol && (col_sums() - b).cwiseAbs().maxCoeff() <= tol;
    }
};

namespace ot {

struct TransportSolution {
    double cost = 0.0;
    CouplingPlan plan;
    long iterations = 0;
};

/// Exact solution of min <C, P> s.t. P 1 = a, P^T 1 = b, P >= 0 (sum a == sum b).
/// Least-cost start, block-search pricing.
inline TransportSolution transport_simplex(const Matrix& cost, const Vector& a, const Vector& b,
                                           long max_iterations = 10'000'000) {
    const Eigen::Index m = cost.rows(), n = cost.cols();
    if (a.size() != m || b.size() != n || m == 0 || n == 0)
        throw ArgumentError("transport_simplex: size mismatch");
    if (std::abs(a.sum() - b.sum()) > 1e-9 * std::max(1.0, a.sum()))
        throw ArgumentError("transport_simplex: unbalanced marginals");

    struct Cell {
        Eigen::Index i, j;
        double flow;
        bool alive;
    };
    std::vector<Cell> cells;
    cells.reserve(static_cast<std::size_t>(m + n));
    // Node ids: rows 0..m-1, columns m..m+n-1. adj holds cell indices.
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(m + n));
    auto add_cell = [&](Eigen::Index i, Eigen::Index j, double f) {
        cells.push_back({i, j, f, true});
        const int id = static_cast<int>(cells.size()) - 1;
        adj[static_cast<std::size_t>(i)].push_back(id);
        adj[static_cast<std::size_t>(m + j)].push_back(id);
        return id;
    };
    auto remove_from = [&](std::vector<int>& v, int id) { v.erase(std::find(v.begin(), v.end(), id)); };

    // Least-cost start: visit cells by increasing cost and retire exactly one line
    // (row or column) per basic cell, so the m + n - 1 basic cells form a spanning tree.
    {
        Vector s = a, d = b * (a.sum() / b.sum());
        std::vector<long> order(static_cast<std::size_t>(m * n));
        std::iota(order.begin(), order.end(), 0L);
        std::sort(order.begin(), order.end(), [&](long x, long y) {
            return cost.data()[x] < cost.data()[y] || (cost.data()[x] == cost.data()[y] && x < y);
        });
        std::vector<char> row_open(static_cast<std::size_t>(m), 1), col_open(static_cast<std::size_t>(n), 1);
        Eigen::Index rows_left = m, cols_left = n;
        for (long idx : order) {
            const Eigen::Index i = idx % m, j = idx / m;
            if (!row_open[static_cast<std::size_t>(i)] || !col_open[static_cast<std::size_t>(j)]) continue;
            const double f = std::min(s(i), d(j));
            add_cell(i, j, f);
            s(i) -= f;
            d(j) -= f;
            if (rows_left == 1 && cols_left == 1) break;
            if (cols_left == 1 || (rows_left > 1 && s(i) <= d(j))) {
                row_open[static_cast<std::size_t>(i)] = 0;
                --rows_left;
            } else {
                col_open[static_cast<std::size_t>(j)] = 0;
                --cols_left;
            }
        }
    }

    const double scale = std::max(cost.cwiseAbs().maxCoeff(), 1e-300);
    const double tol = 1e-12 * scale;
    std::vector<double> u(static_cast<std::size_t>(m)), v(static_cast<std::size_t>(n));
    std::vector<int> stack, parent_cell(static_cast<std::size_t>(m + n));
    std::vector<char> seen(static_cast<std::size_t>(m + n));

    auto compute_potentials = [&] {
        std::fill(seen.begin(), seen.end(), 0);
        stack.assign(1, 0);
        seen[0] = 1;
        u[0] = 0.0;
        while (!stack.empty()) {
            const int node = stack.back();
            stack.pop_back();
            for (int c : adj[static_cast<std::size_t>(node)]) {
                const auto& cell = cells[static_cast<std::size_t>(c)];
                const int other = node < m ? static_cast<int>(m + cell.j) : static_cast<int>(cell.i);
                if (seen[static_cast<std::size_t>(other)]) continue;
                seen[static_cast<std::size_t>(other)] = 1;
                if (other >= m)
                    v[static_cast<std::size_t>(cell.j)] = cost(cell.i, cell.j) - u[static_cast<std::size_t>(cell.i)];
                else
                    u[static_cast<std::size_t>(cell.i)] = cost(cell.i, cell.j) - v[static_cast<std::size_t>(cell.j)];
                stack.push_back(other);
            }
        }
    };

    const long total = static_cast<long>(m) * static_cast<long>(n);
    const long block = std::max(10L, static_cast<long>(std::sqrt(static_cast<double>(total))));
    long cursor = 0;
    long iter = 0;
    for (;; ++iter) {
        if (iter >= max_iterations)
            throw ConvergenceError("transport_simplex: iteration limit reached", {});
        compute_potentials();
        // block search: best candidate within the first block that has one
        double best = -tol;
        Eigen::Index ei = -1, ej = -1;
        for (long scanned = 0; scanned < total && ei < 0;) {
            const long stop = std::min(scanned + block, total);
            for (; scanned < stop; ++scanned) {
                const Eigen::Index i = cursor % m, j = cursor / m;
                const double r = cost(i, j) - u[static_cast<std::size_t>(i)] - v[static_cast<std::size_t>(j)];
                if (r < best) {
                    best = r;
                    ei = i;
                    ej = j;
                }
                if (++cursor == total) cursor = 0;
            }
        }
        if (ei < 0) break;

        // Tree path from row ei to column ej.
        std::fill(seen.begin(), seen.end(), 0);
        std::fill(parent_cell.begin(), parent_cell.end(), -1);
        stack.assign(1, static_cast<int>(ei));
        seen[static_cast<std::size_t>(ei)] = 1;
        const int goal = static_cast<int>(m + ej);
        while (!stack.empty() && !seen[static_cast<std::size_t>(goal)]) {
            const int node = stack.back();
            stack.pop_back();
            for (int c : adj[static_cast<std::size_t>(node)]) {
                const auto& cell = cells[static_cast<std::size_t>(c)];
                const int other = node < m ? static_cast<int>(m + cell.j) : static_cast<int>(cell.i);
                if (seen[static_cast<std::size_t>(other)]) continue;
                seen[static_cast<std::size_t>(other)] = 1;
                parent_cell[static_cast<std::size_t>(other)] = c;
                stack.push_back(other);
            }
        }
        // Walk back from the column: edges alternate -, +, -, ... starting at the column end.
        std::vector<int> path;
        for (int node = goal; node != static_cast<int>(ei);) {
            const int c = parent_cell[static_cast<std::size_t>(node)];
            path.push_back(c);
            const auto& cell = cells[static_cast<std::size_t>(c)];
            node = node >= m ? static_cast<int>(cell.i) : static_cast<int>(m + cell.j);
        }
        double theta = std::numeric_limits<double>::infinity();
        int leaving = -1;
        for (std::size_t k = 0; k < path.size(); k += 2) {
            const double f = cells[static_cast<std::size_t>(path[k])].flow;
            if (f < theta) {
                theta = f;
                leaving = path[k];
            }
        }
        for (std::size_t k = 0; k < path.size(); ++k)
            cells[static_cast<std::size_t>(path[k])].flow += (k % 2 == 0) ? -theta : theta;
        auto& out = cells[static_cast<std::size_t>(leaving)];
        out.alive = false;
        remove_from(adj[static_cast<std::size_t>(out.i)], leaving);
        remove_from(adj[static_cast<std::size_t>(m + out.j)], leaving);
        add_cell(ei, ej, theta);
        if (cells.size() > static_cast<std::size_t>(8 * (m + n))) {
            // compact dead cells
            std::vector<Cell> live;
            for (const auto& c : cells)
                if (c.alive) live.push_back(c);
            cells.clear();
            for (auto& l : adj) l.clear();
            for (const auto& c : live) add_cell(c.i, c.j, c.flow);
        }
    }

    TransportSolution sol;
    sol.iterations = iter;
    sol.plan.rows = m;
    sol.plan.cols = n;
    for (const auto& c : cells) {
        if (!c.alive) continue;
        const double f = std::max(c.flow, 0.0);
        if (f > 0.0) {
            sol.plan.entries.push_back({c.i, c.j, f});
            sol.cost += f * cost(c.i, c.j);
        }
    }
    return sol;
}

/// Minimum-cost perfect matching on a square cost matrix (Jonker-Volgenant:
/// column reduction, augmenting row reduction, then shortest augmenting paths
/// with lazily updated column prices). Returns col_of_row.
inline std::vector<Eigen::Index> assignment(const Matrix& cost_in) {
    using Idx = Eigen::Index;
    const Idx n = cost_in.rows();
    if (cost_in.cols() != n) throw ArgumentError("assignment: cost matrix must be square");
    if (n == 0) return {};
    // rows are scanned in the inner loops
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> c = cost_in;
    const double inf = std::numeric_limits<double>::infinity();
    const auto at = [](auto& vec, Idx i) -> auto& { return vec[static_cast<std::size_t>(i)]; };
    std::vector<Idx> rowsol(static_cast<std::size_t>(n), -1), colsol(static_cast<std::size_t>(n), -1);
    std::vector<double> v(static_cast<std::size_t>(n));
    std::vector<Idx> matches(static_cast<std::size_t>(n), 0), free_rows;

    // column reduction, last column first
    for (Idx j = n - 1; j >= 0; --j) {
        Idx imin = 0;
        double mn = c(0, j);
        for (Idx i = 1; i < n; ++i)
            if (c(i, j) < mn) mn = c(i, j), imin = i;
        at(v, j) = mn;
        if (++at(matches, imin) == 1) {
            at(rowsol, imin) = j;
            at(colsol, j) = imin;
        } else if (mn < at(v, at(rowsol, imin))) {
            const Idx j1 = at(rowsol, imin);
            at(rowsol, imin) = j;
            at(colsol, j) = imin;
            at(colsol, j1) = -1;
        } else {
            at(colsol, j) = -1;
        }
    }
    // reduction transfer
    for (Idx i = 0; i < n; ++i) {
        if (at(matches, i) == 0) {
            free_rows.push_back(i);
        } else if (at(matches, i) == 1) {
            const Idx j1 = at(rowsol, i);
            double mn = inf;
            for (Idx j = 0; j < n; ++j)
                if (j != j1) mn = std::min(mn, c(i, j) - at(v, j));
            if (std::isfinite(mn)) at(v, j1) -= mn;
        }
    }

    // augmenting row reduction, two passes
    for (int pass = 0; pass < 2 && !free_rows.empty(); ++pass) {
        std::vector<Idx> next;
        std::size_t k = 0;
        std::vector<Idx> queue = free_rows;
        long budget = 8 * static_cast<long>(n);  // guards against price cycling on ties
        while (k < queue.size()) {
            const Idx i = queue[k++];
            double umin = c(i, 0) - at(v, 0), usub = inf;
            Idx j1 = 0, j2 = -1;
            for (Idx j = 1; j < n; ++j) {
                const double h = c(i, j) - at(v, j);
                if (h < usub) {
                    if (h >= umin) {
                        usub = h, j2 = j;
                    } else {
                        usub = umin, umin = h, j2 = j1, j1 = j;
                    }
                }
            }
            Idx i0 = at(colsol, j1);
            const bool strict = umin < usub;
            if (strict) {
                at(v, j1) -= usub - umin;
            } else if (i0 >= 0 && j2 >= 0) {
                j1 = j2;
                i0 = at(colsol, j2);
            }
            at(rowsol, i) = j1;
            at(colsol, j1) = i;
            if (i0 >= 0) {
                at(rowsol, i0) = -1;
                if (strict && --budget > 0) queue[--k] = i0;
                else next.push_back(i0);
            }
        }
        free_rows = std::move(next);
    }

    // shortest augmenting paths
    std::vector<double> d(static_cast<std::size_t>(n));
    std::vector<Idx> pred(static_cast<std::size_t>(n)), collist(static_cast<std::size_t>(n));
    for (const Idx freerow : free_rows) {
        for (Idx j = 0; j < n; ++j) {
            at(d, j) = c(freerow, j) - at(v, j);
            at(pred, j) = freerow;
            at(collist, j) = j;
        }
        Idx low = 0, up = 0, last = 0, endofpath = -1;
        double mn = 0.0;
        bool found = false;
        while (!found) {
            if (up == low) {
                // next batch of columns at the current minimum distance
                last = low - 1;
                mn = at(d, at(collist, up++));
                for (Idx k = up; k < n; ++k) {
                    const Idx j = at(collist, k);
                    const double h = at(d, j);
                    if (h <= mn) {
                        if (h < mn) up = low, mn = h;
                        at(collist, k) = at(collist, up);
                        at(collist, up++) = j;
                    }
                }
                for (Idx k = low; k < up; ++k)
                    if (at(colsol, at(collist, k)) < 0) {
                        endofpath = at(collist, k);
                        found = true;
                        break;
                    }
            }
            if (!found) {
                const Idx j1 = at(collist, low++);
                const Idx i = at(colsol, j1);
                const double h = c(i, j1) - at(v, j1) - mn;
                for (Idx k = up; k < n; ++k) {
                    const Idx j = at(collist, k);
                    const double v2 = c(i, j) - at(v, j) - h;
                    if (v2 < at(d, j)) {
                        at(pred, j) = i;
                        if (v2 == mn) {
                            if (at(colsol, j) < 0) {
                                endofpath = j;
                                found = true;
                                break;
                            }
                            at(collist, k) = at(collist, up);
                            at(collist, up++) = j;
                        }
                        at(d, j) = v2;
                    }
                }
            }
        }
        for (Idx k = 0; k <= last; ++k) {
            const Idx j1 = at(collist, k);
            at(v, j1) += at(d, j1) - mn;
        }
        Idx i;
        do {
            i = at(pred, endofpath);
            at(colsol, endofpath) = i;
            const Idx j1 = endofpath;
            endofpath = at(rowsol, i);
            at(rowsol, i) = j1;
        } while (i != freerow);
    }
    for (Idx i = 0; i < n; ++i)
        if (at(rowsol, i) < 0) throw NumericError("assignment: row left unmatched");
    return rowsol;
}

}  // namespace ot
}  // namespace wassoed
