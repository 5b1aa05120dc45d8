#pragma once

// Minimal dense reverse-mode autodiff engine.
//
// A Tape owns all nodes of one forward pass; Tensor is a cheap handle
// (tape pointer + node index). Nodes are recorded in topological order by
// construction, so backward() is a single reverse sweep. Gradients
// accumulate additively across backward() calls until zero_grad().
//
// Only nodes that can influence a grad-requiring leaf (or a node
// explicitly marked via want_grad) participate in the backward sweep;
// everything else is skipped, including the weight-gradient halves of
// matmul adjoints when the weights are frozen.

#include <cassert>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sdtp/common.hpp"
#include "sdtp/kernels.hpp"

namespace sdtp::ad {

using Shape = std::vector<int>;

inline size_t numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); i++) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename Real>
class Tape;

template <typename Real>
class Tensor {
  public:
    Tensor() = default;
    Tensor(Tape<Real>* tape, int id) : tape_(tape), id_(id) {}

    bool valid() const { return tape_ != nullptr; }
    int id() const { return id_; }
    Tape<Real>* tape() const { return tape_; }

    const Shape& shape() const;
    std::span<const Real> values() const;
    std::span<Real> values_mut();
    std::span<const Real> grad() const;

    int rows() const { return shape().empty() ? 1 : shape()[0]; }
    int cols() const { return shape().size() < 2 ? 1 : shape()[1]; }
    Real scalar() const { return values()[0]; }

  private:
    Tape<Real>* tape_ = nullptr;
    int id_ = -1;
};

// One (i, j, sign) supervision pair for the pairwise logistic loss.
struct RankPair {
    int i;
    int j;
    int sign;  // +1 if target_i > target_j, -1 otherwise
};

template <typename Real>
class Tape {
  public:
    struct Node {
        Shape shape;
        std::vector<Real> values;
        std::vector<Real> grad;  // persistent accumulated gradient, lazy
        std::vector<Real> pg;    // scratch gradient of the current backward pass
        bool needs_grad = false;
        std::function<void(Tape&)> backprop;  // empty for leaves/constants
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }

    // -- leaves ----------------------------------------------------------

    Tensor<Real> leaf(Shape shape, std::span<const Real> values, bool requires_grad) {
        if (values.size() != numel(shape)) throw std::invalid_argument("leaf: size mismatch");
        int id = new_node(std::move(shape), requires_grad);
        std::copy(values.begin(), values.end(), node(id).values.begin());
        return {this, id};
    }

    Tensor<Real> constant(Shape shape, std::span<const Real> values) {
        return leaf(std::move(shape), values, false);
    }

    Tensor<Real> zeros(Shape shape, bool requires_grad = false) {
        int id = new_node(std::move(shape), requires_grad);
        return {this, id};
    }

    // Mark an intermediate node as a gradient root source: nodes computed
    // from it will take part in the backward sweep even when no upstream
    // leaf requires grad. Used to pull loss gradients at hidden-state taps.
    void want_grad(const Tensor<Real>& t) { node(t.id()).needs_grad = true; }

    // -- matrix product ---------------------------------------------------

    Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
        return matmul_impl(a, b, false);
    }

    // a [m,k] times b^T where b is [n,k]
    Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
        return matmul_impl(a, b, true);
    }

    // -- elementwise suite -------------------------------------------------

    Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
        check_same_shape("add", a, b);
        int id = new_node(node(a.id()).shape, any_grad({a, b}));
        auto& out = node(id).values;
        auto va = vals(a), vb = vals(b);
        for (size_t i = 0; i < out.size(); i++) out[i] = va[i] + vb[i];
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rb = b.id(), rid = id](Tape& t) {
                auto g = t.vals_grad(rid);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (size_t i = 0; i < ga.size(); i++) ga[i] += g[i];
                });
                t.accumulate(rb, [&](std::span<Real> gb) {
                    for (size_t i = 0; i < gb.size(); i++) gb[i] += g[i];
                });
            };
        }
        return {this, id};
    }

    Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
        check_same_shape("mul", a, b);
        int id = new_node(node(a.id()).shape, any_grad({a, b}));
        auto& out = node(id).values;
        auto va = vals(a), vb = vals(b);
        for (size_t i = 0; i < out.size(); i++) out[i] = va[i] * vb[i];
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rb = b.id(), rid = id](Tape& t) {
                auto g = t.vals_grad(rid);
                auto va = t.vals_by_id(ra), vb = t.vals_by_id(rb);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (size_t i = 0; i < ga.size(); i++) ga[i] += g[i] * vb[i];
                });
                t.accumulate(rb, [&](std::span<Real> gb) {
                    for (size_t i = 0; i < gb.size(); i++) gb[i] += g[i] * va[i];
                });
            };
        }
        return {this, id};
    }

    Tensor<Real> scale(const Tensor<Real>& a, double c) {
        int id = new_node(node(a.id()).shape, node(a.id()).needs_grad);
        auto& out = node(id).values;
        auto va = vals(a);
        for (size_t i = 0; i < out.size(); i++) out[i] = va[i] * Real(c);
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rid = id, c](Tape& t) {
                auto g = t.vals_grad(rid);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (size_t i = 0; i < ga.size(); i++) ga[i] += g[i] * Real(c);
                });
            };
        }
        return {this, id};
    }

    // out[i][j] = a[i][j] + v[j]
    Tensor<Real> add_rowvec(const Tensor<Real>& a, const Tensor<Real>& v) {
        check_rowvec("add_rowvec", a, v);
        int id = new_node(node(a.id()).shape, any_grad({a, v}));
        int r = a.rows(), c = a.cols();
        auto va = vals(a), vv = vals(v);
        auto& out = node(id).values;
        for (int i = 0; i < r; i++)
            for (int j = 0; j < c; j++) out[idx2(i, j, c)] = va[idx2(i, j, c)] + vv[j];
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rv = v.id(), rid = id, r, c](Tape& t) {
                auto g = t.vals_grad(rid);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (size_t i = 0; i < ga.size(); i++) ga[i] += g[i];
                });
                t.accumulate(rv, [&](std::span<Real> gv) {
                    for (int i = 0; i < r; i++)
                        for (int j = 0; j < c; j++) gv[j] += g[idx2(i, j, c)];
                });
            };
        }
        return {this, id};
    }

    // out[i][j] = a[i][j] * v[j]
    Tensor<Real> mul_rowvec(const Tensor<Real>& a, const Tensor<Real>& v) {
        check_rowvec("mul_rowvec", a, v);
        int id = new_node(node(a.id()).shape, any_grad({a, v}));
        int r = a.rows(), c = a.cols();
        auto va = vals(a), vv = vals(v);
        auto& out = node(id).values;
        for (int i = 0; i < r; i++)
            for (int j = 0; j < c; j++) out[idx2(i, j, c)] = va[idx2(i, j, c)] * vv[j];
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rv = v.id(), rid = id, r, c](Tape& t) {
                auto g = t.vals_grad(rid);
                auto va = t.vals_by_id(ra), vv = t.vals_by_id(rv);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (int i = 0; i < r; i++)
                        for (int j = 0; j < c; j++) ga[idx2(i, j, c)] += g[idx2(i, j, c)] * vv[j];
                });
                t.accumulate(rv, [&](std::span<Real> gv) {
                    for (int i = 0; i < r; i++)
                        for (int j = 0; j < c; j++) gv[j] += g[idx2(i, j, c)] * va[idx2(i, j, c)];
                });
            };
        }
        return {this, id};
    }

    Tensor<Real> gelu(const Tensor<Real>& a) {
        int id = new_node(node(a.id()).shape, node(a.id()).needs_grad);
        auto va = vals(a);
        auto& out = node(id).values;
        for (size_t i = 0; i < out.size(); i++) out[i] = kern::gelu(va[i]);
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rid = id](Tape& t) {
                auto g = t.vals_grad(rid);
                auto va = t.vals_by_id(ra);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (size_t i = 0; i < ga.size(); i++) ga[i] += g[i] * kern::gelu_grad(va[i]);
                });
            };
        }
        return {this, id};
    }

    // Row-wise softmax over the last axis of a 2-d tensor. If `causal`,
    // row i is a distribution over columns 0..i only (others exactly 0).
    Tensor<Real> softmax_rows(const Tensor<Real>& a, bool causal = false) {
        check_2d("softmax_rows", a);
        int r = a.rows(), c = a.cols();
        if (causal && r != c) throw std::invalid_argument("softmax_rows: causal needs square");
        int id = new_node(node(a.id()).shape, node(a.id()).needs_grad);
        auto va = vals(a);
        auto& out = node(id).values;
        for (int i = 0; i < r; i++) {
            int lim = causal ? i + 1 : c;
            const Real* src = &va[idx2(i, 0, c)];
            Real* dst = &out[idx2(i, 0, c)];
            std::copy(src, src + lim, dst);
            kern::softmax_inplace(dst, lim);
            // tail already zero-initialized
        }
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rid = id, r, c, causal](Tape& t) {
                auto g = t.vals_grad(rid);
                auto p = t.vals_by_id(rid);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (int i = 0; i < r; i++) {
                        int lim = causal ? i + 1 : c;
                        Real dot = 0;
                        for (int j = 0; j < lim; j++) dot += g[idx2(i, j, c)] * p[idx2(i, j, c)];
                        for (int j = 0; j < lim; j++)
                            ga[idx2(i, j, c)] += p[idx2(i, j, c)] * (g[idx2(i, j, c)] - dot);
                    }
                });
            };
        }
        return {this, id};
    }

    // Causal softmax with differentiable per-key weights w (0/1 from the
    // straight-through mask): p[i][j] = w[j] e^{s[i][j]} / sum_k w[k] e^{s[i][k]}.
    // A row whose admissible weights are all zero yields an all-zero row.
    // Gradients flow into both scores and weights; zero-weight keys still
    // receive a weight gradient, which is the scorer's training signal.
    Tensor<Real> softmax_rows_weighted_causal(const Tensor<Real>& s, const Tensor<Real>& w) {
        check_2d("softmax_rows_weighted_causal", s);
        int r = s.rows(), c = s.cols();
        if (r != c) throw std::invalid_argument("softmax_rows_weighted_causal: square required");
        if (static_cast<int>(numel(node(w.id()).shape)) != c)
            throw std::invalid_argument("softmax_rows_weighted_causal: weight length mismatch");
        int id = new_node(node(s.id()).shape, any_grad({s, w}));
        auto vs = vals(s), vw = vals(w);
        auto& out = node(id).values;
        // cache rowmax and Z for the adjoint
        aux_[id].resize(static_cast<size_t>(r) * 2);
        for (int i = 0; i < r; i++) {
            Real mx = -std::numeric_limits<Real>::infinity();
            for (int j = 0; j <= i; j++)
                if (vw[j] > Real(0)) mx = std::max(mx, vs[idx2(i, j, c)]);
            if (!(mx > -std::numeric_limits<Real>::infinity())) {
                aux_[id][2 * i] = 0;
                aux_[id][2 * i + 1] = 0;
                continue;  // all masked; row stays zero
            }
            Real z = 0;
            for (int j = 0; j <= i; j++) {
                Real e = vw[j] > Real(0) ? vw[j] * std::exp(vs[idx2(i, j, c)] - mx) : Real(0);
                out[idx2(i, j, c)] = e;
                z += e;
            }
            Real inv = Real(1) / z;
            for (int j = 0; j <= i; j++) out[idx2(i, j, c)] *= inv;
            aux_[id][2 * i] = mx;
            aux_[id][2 * i + 1] = z;
        }
        if (node(id).needs_grad) {
            node(id).backprop = [rs = s.id(), rw = w.id(), rid = id, r, c](Tape& t) {
                auto g = t.vals_grad(rid);
                auto p = t.vals_by_id(rid);
                auto vs = t.vals_by_id(rs);
                const auto& aux = t.aux_.at(rid);
                t.accumulate(rs, [&](std::span<Real> gs) {
                    for (int i = 0; i < r; i++) {
                        if (aux[2 * i + 1] == Real(0)) continue;
                        Real dot = 0;
                        for (int j = 0; j <= i; j++) dot += g[idx2(i, j, c)] * p[idx2(i, j, c)];
                        for (int j = 0; j <= i; j++)
                            gs[idx2(i, j, c)] += p[idx2(i, j, c)] * (g[idx2(i, j, c)] - dot);
                    }
                });
                t.accumulate(rw, [&](std::span<Real> gw) {
                    for (int i = 0; i < r; i++) {
                        Real mx = aux[2 * i], z = aux[2 * i + 1];
                        if (z == Real(0)) continue;
                        Real dot = 0;
                        for (int j = 0; j <= i; j++) dot += g[idx2(i, j, c)] * p[idx2(i, j, c)];
                        for (int j = 0; j <= i; j++) {
                            Real e = std::exp(vs[idx2(i, j, c)] - mx) / z;
                            gw[j] += e * (g[idx2(i, j, c)] - dot);
                        }
                    }
                });
            };
        }
        return {this, id};
    }

    Tensor<Real> layer_norm(const Tensor<Real>& a) {
        check_2d("layer_norm", a);
        int r = a.rows(), c = a.cols();
        int id = new_node(node(a.id()).shape, node(a.id()).needs_grad);
        auto va = vals(a);
        auto& out = node(id).values;
        for (int i = 0; i < r; i++) kern::layer_norm_row(&va[idx2(i, 0, c)], &out[idx2(i, 0, c)], c);
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rid = id, r, c](Tape& t) {
                auto g = t.vals_grad(rid);
                auto y = t.vals_by_id(rid);
                auto x = t.vals_by_id(ra);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (int i = 0; i < r; i++) {
                        Real mean = 0, var = 0;
                        for (int j = 0; j < c; j++) mean += x[idx2(i, j, c)];
                        mean /= Real(c);
                        for (int j = 0; j < c; j++) {
                            Real d = x[idx2(i, j, c)] - mean;
                            var += d * d;
                        }
                        var /= Real(c);
                        Real inv = Real(1) / std::sqrt(var + Real(kern::kLayerNormEps));
                        Real gm = 0, gy = 0;
                        for (int j = 0; j < c; j++) {
                            gm += g[idx2(i, j, c)];
                            gy += g[idx2(i, j, c)] * y[idx2(i, j, c)];
                        }
                        gm /= Real(c);
                        gy /= Real(c);
                        for (int j = 0; j < c; j++)
                            ga[idx2(i, j, c)] +=
                                inv * (g[idx2(i, j, c)] - gm - y[idx2(i, j, c)] * gy);
                    }
                });
            };
        }
        return {this, id};
    }

    Tensor<Real> embedding_gather(const Tensor<Real>& table, std::span<const int> ids) {
        check_2d("embedding_gather", table);
        int v = table.rows(), d = table.cols();
        int n = static_cast<int>(ids.size());
        for (int id : ids)
            if (id < 0 || id >= v) throw std::invalid_argument("embedding_gather: id out of range");
        int out_id = new_node(Shape{n, d}, node(table.id()).needs_grad);
        auto vt = vals(table);
        auto& out = node(out_id).values;
        for (int i = 0; i < n; i++)
            std::copy(&vt[idx2(ids[i], 0, d)], &vt[idx2(ids[i], 0, d)] + d, &out[idx2(i, 0, d)]);
        if (node(out_id).needs_grad) {
            node(out_id).backprop = [rt = table.id(), rid = out_id,
                                     ids_copy = std::vector<int>(ids.begin(), ids.end()),
                                     d](Tape& t) {
                auto g = t.vals_grad(rid);
                t.accumulate(rt, [&](std::span<Real> gt) {
                    for (size_t i = 0; i < ids_copy.size(); i++)
                        for (int j = 0; j < d; j++)
                            gt[idx2(ids_copy[i], j, d)] += g[idx2(static_cast<int>(i), j, d)];
                });
            };
        }
        return {this, out_id};
    }

    Tensor<Real> concat_rows(const Tensor<Real>& a, const Tensor<Real>& b) {
        check_2d("concat_rows", a);
        check_2d("concat_rows", b);
        if (a.cols() != b.cols()) throw std::invalid_argument("concat_rows: column mismatch");
        int ra = a.rows(), rb = b.rows(), c = a.cols();
        int id = new_node(Shape{ra + rb, c}, any_grad({a, b}));
        auto va = vals(a), vb = vals(b);
        auto& out = node(id).values;
        std::copy(va.begin(), va.end(), out.begin());
        std::copy(vb.begin(), vb.end(), out.begin() + va.size());
        if (node(id).needs_grad) {
            node(id).backprop = [ia = a.id(), ib = b.id(), rid = id, na = va.size()](Tape& t) {
                auto g = t.vals_grad(rid);
                t.accumulate(ia, [&](std::span<Real> ga) {
                    for (size_t i = 0; i < ga.size(); i++) ga[i] += g[i];
                });
                t.accumulate(ib, [&](std::span<Real> gb) {
                    for (size_t i = 0; i < gb.size(); i++) gb[i] += g[na + i];
                });
            };
        }
        return {this, id};
    }

    Tensor<Real> slice_cols(const Tensor<Real>& a, int c0, int width) {
        check_2d("slice_cols", a);
        int r = a.rows(), c = a.cols();
        if (c0 < 0 || c0 + width > c) throw std::invalid_argument("slice_cols: out of range");
        int id = new_node(Shape{r, width}, node(a.id()).needs_grad);
        auto va = vals(a);
        auto& out = node(id).values;
        for (int i = 0; i < r; i++)
            std::copy(&va[idx2(i, c0, c)], &va[idx2(i, c0, c)] + width, &out[idx2(i, 0, width)]);
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rid = id, r, c, c0, width](Tape& t) {
                auto g = t.vals_grad(rid);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (int i = 0; i < r; i++)
                        for (int j = 0; j < width; j++)
                            ga[idx2(i, c0 + j, c)] += g[idx2(i, j, width)];
                });
            };
        }
        return {this, id};
    }

    Tensor<Real> concat_cols(std::span<const Tensor<Real>> parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
        int r = parts[0].rows();
        int total = 0;
        for (const auto& p : parts) {
            check_2d("concat_cols", p);
            if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
            total += p.cols();
        }
        bool ng = false;
        for (const auto& p : parts) ng = ng || node(p.id()).needs_grad;
        int id = new_node(Shape{r, total}, ng);
        auto& out = node(id).values;
        int off = 0;
        std::vector<int> pids, widths;
        for (const auto& p : parts) {
            auto vp = vals(p);
            int w = p.cols();
            for (int i = 0; i < r; i++)
                std::copy(&vp[idx2(i, 0, w)], &vp[idx2(i, 0, w)] + w, &out[idx2(i, off, total)]);
            pids.push_back(p.id());
            widths.push_back(w);
            off += w;
        }
        if (ng) {
            node(id).backprop = [pids, widths, rid = id, r, total](Tape& t) {
                auto g = t.vals_grad(rid);
                int off = 0;
                for (size_t k = 0; k < pids.size(); k++) {
                    int w = widths[k];
                    t.accumulate(pids[k], [&](std::span<Real> gp) {
                        for (int i = 0; i < r; i++)
                            for (int j = 0; j < w; j++) gp[idx2(i, j, w)] += g[idx2(i, off + j, total)];
                    });
                    off += w;
                }
            };
        }
        return {this, id};
    }

    Tensor<Real> gather_rows(const Tensor<Real>& a, std::span<const int> rows) {
        check_2d("gather_rows", a);
        int r = a.rows(), c = a.cols();
        for (int i : rows)
            if (i < 0 || i >= r) throw std::invalid_argument("gather_rows: index out of range");
        int n = static_cast<int>(rows.size());
        int id = new_node(Shape{n, c}, node(a.id()).needs_grad);
        auto va = vals(a);
        auto& out = node(id).values;
        for (int i = 0; i < n; i++)
            std::copy(&va[idx2(rows[i], 0, c)], &va[idx2(rows[i], 0, c)] + c, &out[idx2(i, 0, c)]);
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rid = id,
                                 rows_copy = std::vector<int>(rows.begin(), rows.end()), c](Tape& t) {
                auto g = t.vals_grad(rid);
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (size_t i = 0; i < rows_copy.size(); i++)
                        for (int j = 0; j < c; j++)
                            ga[idx2(rows_copy[i], j, c)] += g[idx2(static_cast<int>(i), j, c)];
                });
            };
        }
        return {this, id};
    }

    // -- reductions and fused heads ---------------------------------------

    Tensor<Real> sum_all(const Tensor<Real>& a) {
        int id = new_node(Shape{}, node(a.id()).needs_grad);
        auto va = vals(a);
        Real s = 0;
        for (Real v : va) s += v;
        node(id).values[0] = s;
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rid = id](Tape& t) {
                Real g = t.vals_grad(rid)[0];
                t.accumulate(ra, [&](std::span<Real> ga) {
                    for (size_t i = 0; i < ga.size(); i++) ga[i] += g;
                });
            };
        }
        return {this, id};
    }

    Tensor<Real> mean_all(const Tensor<Real>& a) {
        return scale(sum_all(a), 1.0 / static_cast<double>(numel(node(a.id()).shape)));
    }

    // scalar = sum_k w_k * s_k over scalar tensors
    Tensor<Real> weighted_sum(std::span<const Tensor<Real>> terms, std::span<const double> w) {
        if (terms.size() != w.size()) throw std::invalid_argument("weighted_sum: length mismatch");
        bool ng = false;
        for (const auto& s : terms) {
            check_scalar("weighted_sum", s);
            ng = ng || node(s.id()).needs_grad;
        }
        int id = new_node(Shape{}, ng);
        Real acc = 0;
        std::vector<int> ids;
        for (size_t k = 0; k < terms.size(); k++) {
            acc += Real(w[k]) * vals(terms[k])[0];
            ids.push_back(terms[k].id());
        }
        node(id).values[0] = acc;
        if (ng) {
            node(id).backprop = [ids, wc = std::vector<double>(w.begin(), w.end()), rid = id](Tape& t) {
                Real g = t.vals_grad(rid)[0];
                for (size_t k = 0; k < ids.size(); k++) {
                    t.accumulate(ids[k], [&](std::span<Real> gi) { gi[0] += g * Real(wc[k]); });
                }
            };
        }
        return {this, id};
    }

    Tensor<Real> add_scalar_const(const Tensor<Real>& a, double c) {
        check_scalar("add_scalar_const", a);
        int id = new_node(Shape{}, node(a.id()).needs_grad);
        node(id).values[0] = vals(a)[0] + Real(c);
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rid = id](Tape& t) {
                Real g = t.vals_grad(rid)[0];
                t.accumulate(ra, [&](std::span<Real> ga) { ga[0] += g; });
            };
        }
        return {this, id};
    }

    // Mean cross entropy (or sum when mean=false) of next-token rows.
    // include[i] == 0 excludes row i; labels[i] < 0 also excludes.
    Tensor<Real> cross_entropy_rows(const Tensor<Real>& logits, std::span<const int> labels,
                                    std::span<const uint8_t> include, bool mean = true) {
        check_2d("cross_entropy_rows", logits);
        int r = logits.rows(), v = logits.cols();
        if (static_cast<int>(labels.size()) != r)
            throw std::invalid_argument("cross_entropy_rows: label length mismatch");
        if (!include.empty() && static_cast<int>(include.size()) != r)
            throw std::invalid_argument("cross_entropy_rows: include length mismatch");
        int count = 0;
        for (int i = 0; i < r; i++) {
            bool inc = (include.empty() || include[i]) && labels[i] >= 0;
            if (inc && labels[i] >= v)
                throw std::invalid_argument("cross_entropy_rows: label out of range");
            count += inc ? 1 : 0;
        }
        if (count == 0) throw std::invalid_argument("cross_entropy_rows: no included positions");
        int id = new_node(Shape{}, node(logits.id()).needs_grad);
        auto vl = vals(logits);
        double acc = 0;
        for (int i = 0; i < r; i++) {
            bool inc = (include.empty() || include[i]) && labels[i] >= 0;
            if (!inc) continue;
            const Real* row = &vl[idx2(i, 0, v)];
            Real mx = row[0];
            for (int j = 1; j < v; j++) mx = std::max(mx, row[j]);
            double z = 0;
            for (int j = 0; j < v; j++) z += std::exp(static_cast<double>(row[j] - mx));
            acc += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[labels[i]]);
        }
        node(id).values[0] = Real(mean ? acc / count : acc);
        if (node(id).needs_grad) {
            node(id).backprop = [rl = logits.id(), rid = id,
                                 labels_copy = std::vector<int>(labels.begin(), labels.end()),
                                 include_copy = std::vector<uint8_t>(include.begin(), include.end()),
                                 r, v, count, mean](Tape& t) {
                Real g = t.vals_grad(rid)[0];
                auto vl = t.vals_by_id(rl);
                Real unit = mean ? g / Real(count) : g;
                t.accumulate(rl, [&](std::span<Real> gl) {
                    std::vector<Real> p(v);
                    for (int i = 0; i < r; i++) {
                        bool inc = (include_copy.empty() || include_copy[i]) && labels_copy[i] >= 0;
                        if (!inc) continue;
                        const Real* row = &vl[idx2(i, 0, v)];
                        std::copy(row, row + v, p.data());
                        kern::softmax_inplace(p.data(), v);
                        for (int j = 0; j < v; j++) gl[idx2(i, j, v)] += unit * p[j];
                        gl[idx2(i, labels_copy[i], v)] -= unit;
                    }
                });
            };
        }
        return {this, id};
    }

    // Mean of (pred - target)^2 over included entries of a vector.
    // Zero included entries is allowed and yields a constant 0.
    Tensor<Real> masked_mse(const Tensor<Real>& pred, std::span<const Real> target,
                            std::span<const uint8_t> include) {
        size_t n = numel(node(pred.id()).shape);
        if (target.size() != n) throw std::invalid_argument("masked_mse: target length mismatch");
        if (!include.empty() && include.size() != n)
            throw std::invalid_argument("masked_mse: include length mismatch");
        int count = 0;
        for (size_t i = 0; i < n; i++) count += (include.empty() || include[i]) ? 1 : 0;
        int id = new_node(Shape{}, count > 0 && node(pred.id()).needs_grad);
        auto vp = vals(pred);
        double acc = 0;
        for (size_t i = 0; i < n; i++) {
            if (!(include.empty() || include[i])) continue;
            double d = static_cast<double>(vp[i]) - static_cast<double>(target[i]);
            acc += d * d;
        }
        node(id).values[0] = count > 0 ? Real(acc / count) : Real(0);
        if (node(id).needs_grad) {
            node(id).backprop = [rp = pred.id(), rid = id,
                                 tgt = std::vector<Real>(target.begin(), target.end()),
                                 inc = std::vector<uint8_t>(include.begin(), include.end()), n,
                                 count](Tape& t) {
                Real g = t.vals_grad(rid)[0];
                auto vp = t.vals_by_id(rp);
                t.accumulate(rp, [&](std::span<Real> gp) {
                    for (size_t i = 0; i < n; i++) {
                        if (!(inc.empty() || inc[i])) continue;
                        gp[i] += g * Real(2) * (vp[i] - tgt[i]) / Real(count);
                    }
                });
            };
        }
        return {this, id};
    }

    // scale * sum over pairs of log(1 + exp(-(s_i - s_j) * sign))
    Tensor<Real> pairwise_logistic(const Tensor<Real>& s, std::span<const RankPair> pairs,
                                   double scale_factor = 1.0) {
        size_t n = numel(node(s.id()).shape);
        for (const auto& p : pairs)
            if (p.i < 0 || p.j < 0 || p.i >= static_cast<int>(n) || p.j >= static_cast<int>(n))
                throw std::invalid_argument("pairwise_logistic: pair index out of range");
        int id = new_node(Shape{}, node(s.id()).needs_grad);
        auto vs = vals(s);
        double acc = 0;
        for (const auto& p : pairs) {
            double z = (static_cast<double>(vs[p.i]) - static_cast<double>(vs[p.j])) * p.sign;
            acc += kern::log1p_exp(-z);
        }
        node(id).values[0] = Real(acc * scale_factor);
        if (node(id).needs_grad) {
            node(id).backprop = [rs = s.id(), rid = id,
                                 pc = std::vector<RankPair>(pairs.begin(), pairs.end()),
                                 scale_factor](Tape& t) {
                Real g = t.vals_grad(rid)[0] * Real(scale_factor);
                auto vs = t.vals_by_id(rs);
                t.accumulate(rs, [&](std::span<Real> gs) {
                    for (const auto& p : pc) {
                        Real z = (vs[p.i] - vs[p.j]) * Real(p.sign);
                        Real d = -Real(p.sign) * kern::sigmoid(-z);
                        gs[p.i] += g * d;
                        gs[p.j] -= g * d;
                    }
                });
            };
        }
        return {this, id};
    }

    // keep probability of a two-logit row: softmax(pi)[0] = sigmoid(pi0 - pi1)
    Tensor<Real> keep_prob(const Tensor<Real>& pi) {
        check_two_cols("keep_prob", pi);
        int n = pi.rows();
        int id = new_node(Shape{n}, node(pi.id()).needs_grad);
        auto vp = vals(pi);
        auto& out = node(id).values;
        for (int i = 0; i < n; i++) out[i] = kern::sigmoid(vp[idx2(i, 0, 2)] - vp[idx2(i, 1, 2)]);
        if (node(id).needs_grad) {
            node(id).backprop = [rp = pi.id(), rid = id, n](Tape& t) {
                auto g = t.vals_grad(rid);
                auto p = t.vals_by_id(rid);
                t.accumulate(rp, [&](std::span<Real> gp) {
                    for (int i = 0; i < n; i++) {
                        Real d = g[i] * p[i] * (Real(1) - p[i]);
                        gp[idx2(i, 0, 2)] += d;
                        gp[idx2(i, 1, 2)] -= d;
                    }
                });
            };
        }
        return {this, id};
    }

    // keep-logit margin: pi[:,0] - pi[:,1]
    Tensor<Real> keep_margin(const Tensor<Real>& pi) {
        check_two_cols("keep_margin", pi);
        int n = pi.rows();
        int id = new_node(Shape{n}, node(pi.id()).needs_grad);
        auto vp = vals(pi);
        auto& out = node(id).values;
        for (int i = 0; i < n; i++) out[i] = vp[idx2(i, 0, 2)] - vp[idx2(i, 1, 2)];
        if (node(id).needs_grad) {
            node(id).backprop = [rp = pi.id(), rid = id, n](Tape& t) {
                auto g = t.vals_grad(rid);
                t.accumulate(rp, [&](std::span<Real> gp) {
                    for (int i = 0; i < n; i++) {
                        gp[idx2(i, 0, 2)] += g[i];
                        gp[idx2(i, 1, 2)] -= g[i];
                    }
                });
            };
        }
        return {this, id};
    }

    // Straight-through Gumbel keep mask. Forward: hard 0/1 decisions
    // (argmax over the two noisy logits), protected rows forced to 1.
    // Backward: gradient of the soft sample softmax((pi+noise)/tau)[0];
    // protected rows pass no gradient.
    Tensor<Real> gumbel_keep_st(const Tensor<Real>& pi, std::span<const Real> noise, double tau,
                                std::span<const uint8_t> protected_mask) {
        check_two_cols("gumbel_keep_st", pi);
        int n = pi.rows();
        if (noise.size() != static_cast<size_t>(n) * 2)
            throw std::invalid_argument("gumbel_keep_st: noise shape mismatch");
        if (!protected_mask.empty() && static_cast<int>(protected_mask.size()) != n)
            throw std::invalid_argument("gumbel_keep_st: protected length mismatch");
        if (!(tau > 0)) throw std::invalid_argument("gumbel_keep_st: tau must be positive");
        int id = new_node(Shape{n}, node(pi.id()).needs_grad);
        auto vp = vals(pi);
        auto& out = node(id).values;
        for (int i = 0; i < n; i++) {
            bool prot = !protected_mask.empty() && protected_mask[i];
            Real a = vp[idx2(i, 0, 2)] + noise[idx2(i, 0, 2)];
            Real b = vp[idx2(i, 1, 2)] + noise[idx2(i, 1, 2)];
            out[i] = (prot || a >= b) ? Real(1) : Real(0);
        }
        if (node(id).needs_grad) {
            node(id).backprop = [rp = pi.id(), rid = id,
                                 nz = std::vector<Real>(noise.begin(), noise.end()),
                                 pm = std::vector<uint8_t>(protected_mask.begin(), protected_mask.end()),
                                 tau, n](Tape& t) {
                auto g = t.vals_grad(rid);
                auto vp = t.vals_by_id(rp);
                t.accumulate(rp, [&](std::span<Real> gp) {
                    for (int i = 0; i < n; i++) {
                        if (!pm.empty() && pm[i]) continue;
                        Real a = vp[idx2(i, 0, 2)] + nz[idx2(i, 0, 2)];
                        Real b = vp[idx2(i, 1, 2)] + nz[idx2(i, 1, 2)];
                        Real y = kern::sigmoid((a - b) / Real(tau));
                        Real d = g[i] * y * (Real(1) - y) / Real(tau);
                        gp[idx2(i, 0, 2)] += d;
                        gp[idx2(i, 1, 2)] -= d;
                    }
                });
            };
        }
        return {this, id};
    }

    // -- backward ----------------------------------------------------------

    // Each call propagates exactly the derivative of `s` and then folds it
    // into the persistent grad buffers, so two calls accumulate 2x and the
    // backward of a sum equals the sum of individual backward passes.
    void backward(const Tensor<Real>& s) {
        if (!node(s.id()).shape.empty())
            throw std::invalid_argument("backward: argument must be a scalar (0-d) tensor, got " +
                                        shape_str(node(s.id()).shape));
        ensure_pg(s.id());
        node(s.id()).pg[0] += Real(1);
        for (int i = s.id(); i >= 0; i--) {
            Node& nd = nodes_[i];
            if (!nd.needs_grad || !nd.backprop) continue;
            if (nd.pg.empty()) continue;  // this pass never reached the node
            nd.backprop(*this);
        }
        for (int i = s.id(); i >= 0; i--) {
            Node& nd = nodes_[i];
            if (nd.pg.empty()) continue;
            if (nd.grad.empty()) {
                nd.grad = std::move(nd.pg);
            } else {
                for (size_t k = 0; k < nd.grad.size(); k++) nd.grad[k] += nd.pg[k];
            }
            nd.pg.clear();
        }
    }

    void zero_grad() {
        for (auto& nd : nodes_) {
            std::fill(nd.grad.begin(), nd.grad.end(), Real(0));
            nd.pg.clear();
        }
    }

    // -- access ------------------------------------------------------------

    Node& node(int id) { return nodes_.at(id); }
    const Node& node(int id) const { return nodes_.at(id); }

    std::span<const Real> vals(const Tensor<Real>& t) { return node(t.id()).values; }
    std::span<const Real> vals_by_id(int id) { return node(id).values; }
    // gradient arriving at a node within the current backward pass
    std::span<Real> vals_grad(int id) {
        ensure_pg(id);
        return node(id).pg;
    }
    std::span<const Real> grad_of(const Tensor<Real>& t) {
        ensure_grad(t.id());
        return node(t.id()).grad;
    }

  private:
    template <typename Fn>
    void accumulate(int id, Fn&& fn) {
        if (!node(id).needs_grad) return;
        ensure_pg(id);
        fn(std::span<Real>(node(id).pg));
    }

    void ensure_grad(int id) {
        Node& nd = node(id);
        if (nd.grad.empty()) nd.grad.assign(nd.values.size(), Real(0));
    }
    void ensure_pg(int id) {
        Node& nd = node(id);
        if (nd.pg.empty()) nd.pg.assign(nd.values.size(), Real(0));
    }

    int new_node(Shape shape, bool needs_grad) {
        Node nd;
        nd.values.assign(numel(shape), Real(0));
        nd.shape = std::move(shape);
        nd.needs_grad = needs_grad;
        nodes_.push_back(std::move(nd));
        return static_cast<int>(nodes_.size()) - 1;
    }

    bool any_grad(std::initializer_list<Tensor<Real>> ts) {
        for (const auto& t : ts)
            if (node(t.id()).needs_grad) return true;
        return false;
    }

    static size_t idx2(int i, int j, int cols) { return static_cast<size_t>(i) * cols + j; }

    void check_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
        if (node(a.id()).shape != node(b.id()).shape)
            throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                        shape_str(node(a.id()).shape) + " vs " +
                                        shape_str(node(b.id()).shape));
    }
    void check_2d(const char* op, const Tensor<Real>& a) {
        if (node(a.id()).shape.size() != 2)
            throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got " +
                                        shape_str(node(a.id()).shape));
    }
    void check_scalar(const char* op, const Tensor<Real>& a) {
        if (!node(a.id()).shape.empty())
            throw std::invalid_argument(std::string(op) + ": expected scalar, got " +
                                        shape_str(node(a.id()).shape));
    }
    void check_two_cols(const char* op, const Tensor<Real>& a) {
        check_2d(op, a);
        if (a.cols() != 2)
            throw std::invalid_argument(std::string(op) + ": expected [N,2] logits, got " +
                                        shape_str(node(a.id()).shape));
    }
    void check_rowvec(const char* op, const Tensor<Real>& a, const Tensor<Real>& v) {
        check_2d(op, a);
        if (numel(node(v.id()).shape) != static_cast<size_t>(a.cols()))
            throw std::invalid_argument(std::string(op) + ": vector length " +
                                        shape_str(node(v.id()).shape) + " does not match columns of " +
                                        shape_str(node(a.id()).shape));
    }

    Tensor<Real> matmul_impl(const Tensor<Real>& a, const Tensor<Real>& b, bool nt) {
        check_2d("matmul", a);
        check_2d("matmul", b);
        int m = a.rows(), k = a.cols();
        int bk = nt ? b.cols() : b.rows();
        int n = nt ? b.rows() : b.cols();
        if (k != bk)
            throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                        shape_str(node(a.id()).shape) + " vs " +
                                        shape_str(node(b.id()).shape) + (nt ? " (transposed)" : ""));
        int id = new_node(Shape{m, n}, any_grad({a, b}));
        auto va = vals(a), vb = vals(b);
        kern::gemm<Real>(false, nt, m, n, k, Real(1), va.data(), a.cols(), vb.data(), b.cols(),
                         Real(0), node(id).values.data(), n);
        if (node(id).needs_grad) {
            node(id).backprop = [ra = a.id(), rb = b.id(), rid = id, m, n, k, nt](Tape& t) {
                auto g = t.vals_grad(rid);
                auto va = t.vals_by_id(ra);
                auto vb = t.vals_by_id(rb);
                int bcols = nt ? k : n;
                if (t.node(ra).needs_grad) {
                    t.ensure_pg(ra);
                    // dA = g * B^T   (or g * B when B entered transposed)
                    kern::gemm<Real>(false, !nt, m, k, n, Real(1), g.data(), n, vb.data(), bcols,
                                     Real(1), t.node(ra).pg.data(), k);
                }
                if (t.node(rb).needs_grad) {
                    t.ensure_pg(rb);
                    if (!nt) {
                        // dB = A^T * g
                        kern::gemm<Real>(true, false, k, n, m, Real(1), va.data(), k, g.data(), n,
                                         Real(1), t.node(rb).pg.data(), n);
                    } else {
                        // B is [n,k] used as B^T: dB = g^T * A
                        kern::gemm<Real>(true, false, n, k, m, Real(1), g.data(), n, va.data(), k,
                                         Real(1), t.node(rb).pg.data(), k);
                    }
                }
            };
        }
        return {this, id};
    }

    std::vector<Node> nodes_;
    std::unordered_map<int, std::vector<Real>> aux_;  // per-node cached forward stats

    friend class Tensor<Real>;
};

template <typename Real>
const Shape& Tensor<Real>::shape() const {
    return tape_->node(id_).shape;
}
template <typename Real>
std::span<const Real> Tensor<Real>::values() const {
    return tape_->node(id_).values;
}
template <typename Real>
std::span<Real> Tensor<Real>::values_mut() {
    return tape_->node(id_).values;
}
template <typename Real>
std::span<const Real> Tensor<Real>::grad() const {
    return tape_->grad_of(*this);
}

// Central finite-difference check of df/dx at `point`.
// f must build a scalar from a leaf tensor on the given tape.
struct FdReport {
    double max_rel_err = 0.0;
    int evaluated = 0;
    bool failed_nan = false;
    bool ok(double tol) const { return !failed_nan && max_rel_err < tol; }
};

template <typename Real, typename F>
FdReport finite_diff_check(F&& f, const Shape& shape, std::span<const Real> point, int samples,
                           Rng& rng, double h = 1e-5) {
    FdReport rep;
    std::vector<Real> x(point.begin(), point.end());

    Tape<Real> tape;
    auto leaf = tape.leaf(shape, x, true);
    auto out = f(tape, leaf);
    tape.backward(out);
    std::vector<Real> analytic(tape.grad_of(leaf).begin(), tape.grad_of(leaf).end());
    if (!std::isfinite(static_cast<double>(out.scalar()))) {
        rep.failed_nan = true;
        return rep;
    }

    auto eval = [&](std::span<const Real> pt) {
        Tape<Real> t;
        auto l = t.leaf(shape, pt, false);
        return static_cast<double>(f(t, l).scalar());
    };

    size_t n = x.size();
    int todo = std::min<int>(samples, static_cast<int>(n));
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; i++) idx[i] = i;
    rng.shuffle(idx);
    for (int s = 0; s < todo; s++) {
        size_t i = idx[s];
        Real keep = x[i];
        x[i] = keep + Real(h);
        double fp = eval(x);
        x[i] = keep - Real(h);
        double fm = eval(x);
        x[i] = keep;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            rep.failed_nan = true;
            return rep;
        }
        double fd = (fp - fm) / (2.0 * h);
        double rel = std::abs(static_cast<double>(analytic[i]) - fd) / (std::abs(fd) + 1e-12);
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        rep.evaluated++;
    }
    return rep;
}

}  // namespace sdtp::ad
