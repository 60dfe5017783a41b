#include "chanopt/trainer.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "chanopt/errors.hpp"
#include "chanopt/rng.hpp"

namespace chanopt {

namespace {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapM = Eigen::Map<MatX<Scalar>>;
template <typename Scalar>
using CMapM = Eigen::Map<const MatX<Scalar>>;

struct LayerSpec {
  std::string edge_id;
  EdgeKind kind = EdgeKind::kConv;
  int kh = 0, kw = 0;
  int c_in = 0, c_out = 0;  // depthwise: c_in == c_out == channel count
  bool has_bias = false;
  std::size_t w_off = 0, w_len = 0;
  std::size_t b_off = 0, b_len = 0;
};

struct EdgePlan {
  std::string id;
  EdgeKind kind = EdgeKind::kConv;
  int tail = -1, head = -1;  // node indices
  int layer = -1;            // LayerSpec index for weight-bearing edges
  int out_c = 0;
  int concat_offset = 0;  // channel offset within a concatenation head
};

struct NodePlan {
  std::string id;
  CombineMode combine = CombineMode::kSingle;
  int c = 0;
  int pool_level = 0;  // halvings of the input resolution
  bool is_source = false;
  std::vector<int> inbound;  // EdgePlan indices, sorted by edge id
};

struct Plan {
  std::vector<NodePlan> nodes;  // topological order
  std::vector<EdgePlan> edges;
  std::vector<LayerSpec> layers;  // sorted by edge id
  int source_node = -1;
  int head_node = -1;
  int classes = 0;
  int input_channels = 0;
  int max_pool_level = 0;
  std::size_t head_w_off = 0, head_b_off = 0;
  std::size_t total_params = 0;
  int head_c = 0;
};

Plan make_plan(const NetGraph& g, const ChannelAssignment& a,
               const ConcreteSizes& sizes) {
  const auto issues = validate_assignment(g, a, sizes);
  if (!issues.empty()) {
    throw IncompatibilityError("build_model: sizes do not validate: '" +
                               issues.front().subject + "': " +
                               issues.front().message);
  }
  if (!g.has_head()) {
    throw GraphError("build_model: graph declares no classifier head");
  }

  Plan plan;
  plan.classes = g.num_classes();

  const auto order = topo_queue(g);
  std::map<std::string, int> node_index;
  for (const auto& node_id : order) {
    NodePlan np;
    np.id = node_id;
    np.combine = g.node(node_id).combine;
    np.c = static_cast<int>(evaluate_depth(a.node_depth.at(node_id), sizes));
    np.is_source = g.inbound(node_id).empty();
    node_index[node_id] = static_cast<int>(plan.nodes.size());
    plan.nodes.push_back(std::move(np));
  }

  for (const auto& node_id : order) {
    if (!plan.nodes[node_index[node_id]].is_source) continue;
    if (plan.source_node >= 0) {
      throw GraphError("build_model: training needs exactly one source node, "
                       "found several");
    }
    plan.source_node = node_index[node_id];
  }
  if (plan.source_node < 0) {
    throw GraphError("build_model: no source node");
  }
  plan.input_channels = plan.nodes[plan.source_node].c;
  plan.head_node = node_index.at(g.head_node());
  plan.head_c = plan.nodes[plan.head_node].c;

  // Layers in sorted-edge-id order define the parameter layout and the
  // snapshot manifest.
  for (const auto& eid : g.edge_ids()) {
    const GraphEdge& e = g.edge(eid);
    if (!is_weight_bearing(e.kind)) continue;
    if (e.kh % 2 == 0 || e.kw % 2 == 0) {
      throw GraphError("build_model: edge '" + eid +
                       "' has an even kernel; same-padding training needs odd "
                       "kernels");
    }
    LayerSpec l;
    l.edge_id = eid;
    l.kind = e.kind;
    l.kh = e.kh;
    l.kw = e.kw;
    l.c_in = static_cast<int>(evaluate_depth(a.node_depth.at(e.tail), sizes));
    l.c_out = e.kind == EdgeKind::kDepthwise
                  ? l.c_in
                  : static_cast<int>(evaluate_depth(a.edge_out.at(eid), sizes));
    l.has_bias = e.has_bias;
    l.w_off = plan.total_params;
    l.w_len = static_cast<std::size_t>(l.kh) * l.kw *
              (e.kind == EdgeKind::kDepthwise ? 1 : l.c_in) * l.c_out;
    plan.total_params += l.w_len;
    l.b_off = plan.total_params;
    l.b_len = l.has_bias ? l.c_out : 0;
    plan.total_params += l.b_len;
    plan.layers.push_back(std::move(l));
  }
  plan.head_w_off = plan.total_params;
  plan.total_params += static_cast<std::size_t>(plan.head_c) * plan.classes;
  plan.head_b_off = plan.total_params;
  plan.total_params += plan.classes;

  std::map<std::string, int> layer_index;
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    layer_index[plan.layers[i].edge_id] = static_cast<int>(i);
  }

  // Edges and static spatial levels. Processing nodes in topological order
  // guarantees tails are resolved before heads.
  std::map<std::string, int> edge_index;
  for (auto& np : plan.nodes) {
    const int my_index = node_index[np.id];
    if (np.is_source) {
      np.pool_level = 0;
    }
    for (const auto& eid : g.inbound(np.id)) {
      const GraphEdge& e = g.edge(eid);
      EdgePlan ep;
      ep.id = eid;
      ep.kind = e.kind;
      ep.tail = node_index.at(e.tail);
      ep.head = my_index;
      if (is_weight_bearing(e.kind)) ep.layer = layer_index.at(eid);
      ep.out_c = is_depth_changing(e.kind)
                     ? static_cast<int>(evaluate_depth(a.edge_out.at(eid), sizes))
                     : plan.nodes[ep.tail].c;
      const int level =
          plan.nodes[ep.tail].pool_level + (e.kind == EdgeKind::kPool ? 1 : 0);
      if (np.inbound.empty()) {
        np.pool_level = level;
      } else if (np.pool_level != level) {
        throw GraphError("build_model: node '" + np.id +
                         "' combines inputs at different spatial resolutions");
      }
      edge_index[eid] = static_cast<int>(plan.edges.size());
      np.inbound.push_back(static_cast<int>(plan.edges.size()));
      plan.edges.push_back(std::move(ep));
    }
    if (np.combine == CombineMode::kConcatenation) {
      int offset = 0;
      for (int ei : np.inbound) {
        plan.edges[ei].concat_offset = offset;
        offset += plan.edges[ei].out_c;
      }
    }
    plan.max_pool_level = std::max(plan.max_pool_level, np.pool_level);
  }
  return plan;
}

// im2col for same-padded convolution over HWC activations.
template <typename Scalar>
void im2col(const Scalar* act, int n, int h, int w, int c, int kh, int kw,
            std::vector<Scalar>& col) {
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t k = static_cast<std::size_t>(kh) * kw * c;
  col.assign(static_cast<std::size_t>(n) * h * w * k, Scalar(0));
  for (int b = 0; b < n; ++b) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        Scalar* row =
            col.data() + (static_cast<std::size_t>(b) * h * w + y * w + x) * k;
        for (int dy = 0; dy < kh; ++dy) {
          const int sy = y + dy - ph;
          if (sy < 0 || sy >= h) continue;
          for (int dx = 0; dx < kw; ++dx) {
            const int sx = x + dx - pw;
            if (sx < 0 || sx >= w) continue;
            const Scalar* src =
                act + (static_cast<std::size_t>(b) * h * w + sy * w + sx) * c;
            Scalar* dst = row + (static_cast<std::size_t>(dy) * kw + dx) * c;
            for (int i = 0; i < c; ++i) dst[i] = src[i];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, int n, int h, int w, int c, int kh, int kw,
                Scalar* act_grad) {
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t k = static_cast<std::size_t>(kh) * kw * c;
  for (int b = 0; b < n; ++b) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Scalar* row =
            col + (static_cast<std::size_t>(b) * h * w + y * w + x) * k;
        for (int dy = 0; dy < kh; ++dy) {
          const int sy = y + dy - ph;
          if (sy < 0 || sy >= h) continue;
          for (int dx = 0; dx < kw; ++dx) {
            const int sx = x + dx - pw;
            if (sx < 0 || sx >= w) continue;
            Scalar* dst =
                act_grad +
                (static_cast<std::size_t>(b) * h * w + sy * w + sx) * c;
            const Scalar* src = row + (static_cast<std::size_t>(dy) * kw + dx) * c;
            for (int i = 0; i < c; ++i) dst[i] += src[i];
          }
        }
      }
    }
  }
}

// Forward/backward engine over one parameter vector. Instantiated for double
// (default, gradient checks) and float (single-precision mode).
template <typename Scalar>
class Engine {
 public:
  Engine(const Plan& plan, std::vector<Scalar> params)
      : plan_(plan), params_(std::move(params)) {}

  std::vector<Scalar>& params() { return params_; }

  // Mean cross-entropy over the batch; activations retained for backward.
  double forward(const Dataset& data, const std::vector<int>& indices,
                 int image_size) {
    const int n = static_cast<int>(indices.size());
    if (n < 1) throw std::invalid_argument("trainer: empty batch");
    h0_ = image_size;
    if (h0_ % (1 << plan_.max_pool_level) != 0 ||
        (h0_ >> plan_.max_pool_level) < 1) {
      throw IncompatibilityError(
          "trainer: image size " + std::to_string(h0_) +
          " is not divisible by the pooling structure of the graph");
    }
    n_ = n;
    node_act_.resize(plan_.nodes.size());
    edge_act_.resize(plan_.edges.size());

    for (std::size_t ni = 0; ni < plan_.nodes.size(); ++ni) {
      const NodePlan& np = plan_.nodes[ni];
      const int h = h0_ >> np.pool_level;
      const int w = h;
      auto& act = node_act_[ni];
      act.assign(static_cast<std::size_t>(n) * h * w * np.c, Scalar(0));
      if (np.is_source) {
        if (data.channels != np.c || data.image_size != h0_) {
          throw IncompatibilityError(
              "trainer: dataset images do not match the source node shape");
        }
        for (int b = 0; b < n; ++b) {
          if (indices[b] < 0 || indices[b] >= data.samples) {
            throw std::invalid_argument("trainer: sample index out of range");
          }
          const double* src = data.images.data() +
                              static_cast<std::size_t>(indices[b]) * h * w * np.c;
          Scalar* dst = act.data() + static_cast<std::size_t>(b) * h * w * np.c;
          for (int i = 0; i < h * w * np.c; ++i) {
            dst[i] = static_cast<Scalar>(src[i]);
          }
        }
        continue;
      }
      for (int ei : np.inbound) {
        const EdgePlan& ep = plan_.edges[ei];
        const Scalar* out = edge_forward(ei);
        // Combine into the node activation.
        const std::size_t pixels = static_cast<std::size_t>(n) * h * w;
        if (np.combine == CombineMode::kConcatenation) {
          for (std::size_t p = 0; p < pixels; ++p) {
            Scalar* dst = act.data() + p * np.c + ep.concat_offset;
            const Scalar* src = out + p * ep.out_c;
            for (int i = 0; i < ep.out_c; ++i) dst[i] = src[i];
          }
        } else {
          for (std::size_t i = 0; i < pixels * np.c; ++i) act[i] += out[i];
        }
      }
    }
    return head_loss(data, indices);
  }

  // Gradients for the most recent forward batch, in parameter layout.
  std::vector<Scalar> backward(const Dataset& data,
                               const std::vector<int>& indices) {
    const int n = n_;
    std::vector<Scalar> grads(plan_.total_params, Scalar(0));
    node_grad_.resize(plan_.nodes.size());
    for (std::size_t ni = 0; ni < plan_.nodes.size(); ++ni) {
      node_grad_[ni].assign(node_act_[ni].size(), Scalar(0));
    }

    // Head: softmax cross-entropy over globally averaged features.
    {
      const NodePlan& np = plan_.nodes[plan_.head_node];
      const int h = h0_ >> np.pool_level;
      const int hw = h * h;
      MapM<Scalar> dlogits(probs_.data(), n, plan_.classes);
      for (int b = 0; b < n; ++b) {
        dlogits(b, data.labels[indices[b]]) -= Scalar(1);
      }
      dlogits *= Scalar(1) / Scalar(n);
      CMapM<Scalar> feat(feat_.data(), n, plan_.head_c);
      CMapM<Scalar> head_w(params_.data() + plan_.head_w_off, plan_.head_c,
                           plan_.classes);
      MapM<Scalar> d_head_w(grads.data() + plan_.head_w_off, plan_.head_c,
                            plan_.classes);
      d_head_w.noalias() = feat.transpose() * dlogits;
      MapM<Scalar> d_head_b(grads.data() + plan_.head_b_off, 1, plan_.classes);
      d_head_b.noalias() = dlogits.colwise().sum();
      dfeat_.assign(static_cast<std::size_t>(n) * plan_.head_c, Scalar(0));
      MapM<Scalar> dfeat(dfeat_.data(), n, plan_.head_c);
      dfeat.noalias() = dlogits * head_w.transpose();
      auto& hg = node_grad_[plan_.head_node];
      const Scalar inv = Scalar(1) / Scalar(hw);
      for (int b = 0; b < n; ++b) {
        for (int p = 0; p < hw; ++p) {
          Scalar* dst = hg.data() + (static_cast<std::size_t>(b) * hw + p) * np.c;
          const Scalar* src = dfeat.data() + static_cast<std::size_t>(b) * np.c;
          for (int i = 0; i < np.c; ++i) dst[i] += src[i] * inv;
        }
      }
    }

    for (std::size_t r = plan_.nodes.size(); r-- > 0;) {
      const NodePlan& np = plan_.nodes[r];
      if (np.is_source) continue;
      const int h = h0_ >> np.pool_level;
      const std::size_t pixels = static_cast<std::size_t>(n) * h * h;
      for (int ei : np.inbound) {
        const EdgePlan& ep = plan_.edges[ei];
        if (np.combine == CombineMode::kConcatenation) {
          dedge_.assign(pixels * ep.out_c, Scalar(0));
          for (std::size_t p = 0; p < pixels; ++p) {
            const Scalar* src = node_grad_[r].data() + p * np.c + ep.concat_offset;
            Scalar* dst = dedge_.data() + p * ep.out_c;
            for (int i = 0; i < ep.out_c; ++i) dst[i] = src[i];
          }
          edge_backward(ei, dedge_.data(), grads);
        } else {
          edge_backward(ei, node_grad_[r].data(), grads);
        }
      }
    }
    return grads;
  }

 private:
  const Scalar* edge_forward(int ei) {
    const EdgePlan& ep = plan_.edges[ei];
    const NodePlan& tail = plan_.nodes[ep.tail];
    const int th = h0_ >> tail.pool_level;
    const std::size_t tail_count =
        static_cast<std::size_t>(n_) * th * th * tail.c;
    const Scalar* in = node_act_[ep.tail].data();
    switch (ep.kind) {
      case EdgeKind::kSkip:
      case EdgeKind::kNonConv:
        return in;  // identity; gradient flows straight through
      case EdgeKind::kPool: {
        const int oh = th / 2;
        auto& out = edge_act_[ei];
        out.assign(static_cast<std::size_t>(n_) * oh * oh * tail.c, Scalar(0));
        for (int b = 0; b < n_; ++b) {
          for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < oh; ++x) {
              Scalar* dst =
                  out.data() +
                  (static_cast<std::size_t>(b) * oh * oh + y * oh + x) * tail.c;
              for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                  const Scalar* src =
                      in + (static_cast<std::size_t>(b) * th * th +
                            (2 * y + dy) * th + (2 * x + dx)) *
                               tail.c;
                  for (int i = 0; i < tail.c; ++i) {
                    dst[i] += src[i] * Scalar(0.25);
                  }
                }
              }
            }
          }
        }
        return out.data();
      }
      case EdgeKind::kDepthwise: {
        const LayerSpec& l = plan_.layers[ep.layer];
        auto& out = edge_act_[ei];
        out.assign(tail_count, Scalar(0));
        const int ph = l.kh / 2, pw = l.kw / 2;
        for (int b = 0; b < n_; ++b) {
          for (int y = 0; y < th; ++y) {
            for (int x = 0; x < th; ++x) {
              Scalar* dst = out.data() +
                            (static_cast<std::size_t>(b) * th * th + y * th + x) *
                                tail.c;
              for (int dy = 0; dy < l.kh; ++dy) {
                const int sy = y + dy - ph;
                if (sy < 0 || sy >= th) continue;
                for (int dx = 0; dx < l.kw; ++dx) {
                  const int sx = x + dx - pw;
                  if (sx < 0 || sx >= th) continue;
                  const Scalar* src =
                      in + (static_cast<std::size_t>(b) * th * th + sy * th + sx) *
                               tail.c;
                  const std::size_t w_base =
                      l.w_off +
                      (static_cast<std::size_t>(dy) * l.kw + dx) * tail.c;
                  for (int i = 0; i < tail.c; ++i) {
                    dst[i] += src[i] * params_[w_base + i];
                  }
                }
              }
            }
          }
        }
        finish_bias_relu(out, l, tail.c);
        return out.data();
      }
      case EdgeKind::kConv:
      case EdgeKind::kPointwise: {
        const LayerSpec& l = plan_.layers[ep.layer];
        im2col(in, n_, th, th, tail.c, l.kh, l.kw, col_);
        const std::size_t k = static_cast<std::size_t>(l.kh) * l.kw * tail.c;
        auto& out = edge_act_[ei];
        out.assign(static_cast<std::size_t>(n_) * th * th * l.c_out, Scalar(0));
        CMapM<Scalar> colm(col_.data(), static_cast<Eigen::Index>(n_) * th * th,
                           static_cast<Eigen::Index>(k));
        CMapM<Scalar> wm(params_.data() + l.w_off, static_cast<Eigen::Index>(k),
                         l.c_out);
        MapM<Scalar> om(out.data(), static_cast<Eigen::Index>(n_) * th * th,
                        l.c_out);
        om.noalias() = colm * wm;
        finish_bias_relu(out, l, l.c_out);
        return out.data();
      }
    }
    throw std::logic_error("trainer: unhandled edge kind");
  }

  void finish_bias_relu(std::vector<Scalar>& out, const LayerSpec& l, int c) {
    const std::size_t pixels = out.size() / c;
    if (l.has_bias) {
      for (std::size_t p = 0; p < pixels; ++p) {
        Scalar* row = out.data() + p * c;
        for (int i = 0; i < c; ++i) row[i] += params_[l.b_off + i];
      }
    }
    for (auto& v : out) {
      if (v < Scalar(0)) v = Scalar(0);
    }
  }

  void edge_backward(int ei, const Scalar* dout, std::vector<Scalar>& grads) {
    const EdgePlan& ep = plan_.edges[ei];
    const NodePlan& tail = plan_.nodes[ep.tail];
    const int th = h0_ >> tail.pool_level;
    Scalar* din = node_grad_[ep.tail].data();
    switch (ep.kind) {
      case EdgeKind::kSkip:
      case EdgeKind::kNonConv: {
        const std::size_t count = static_cast<std::size_t>(n_) * th * th * tail.c;
        for (std::size_t i = 0; i < count; ++i) din[i] += dout[i];
        return;
      }
      case EdgeKind::kPool: {
        const int oh = th / 2;
        for (int b = 0; b < n_; ++b) {
          for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < oh; ++x) {
              const Scalar* src =
                  dout +
                  (static_cast<std::size_t>(b) * oh * oh + y * oh + x) * tail.c;
              for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                  Scalar* dst =
                      din + (static_cast<std::size_t>(b) * th * th +
                             (2 * y + dy) * th + (2 * x + dx)) *
                                tail.c;
                  for (int i = 0; i < tail.c; ++i) {
                    dst[i] += src[i] * Scalar(0.25);
                  }
                }
              }
            }
          }
        }
        return;
      }
      case EdgeKind::kDepthwise: {
        const LayerSpec& l = plan_.layers[ep.layer];
        const auto& out = edge_act_[ei];
        const Scalar* in = node_act_[ep.tail].data();
        const int ph = l.kh / 2, pw = l.kw / 2;
        for (int b = 0; b < n_; ++b) {
          for (int y = 0; y < th; ++y) {
            for (int x = 0; x < th; ++x) {
              const std::size_t o =
                  (static_cast<std::size_t>(b) * th * th + y * th + x) * tail.c;
              for (int i = 0; i < tail.c; ++i) {
                if (out[o + i] <= Scalar(0)) continue;  // rectifier mask
                const Scalar dz = dout[o + i];
                if (l.has_bias) grads[l.b_off + i] += dz;
                for (int dy = 0; dy < l.kh; ++dy) {
                  const int sy = y + dy - ph;
                  if (sy < 0 || sy >= th) continue;
                  for (int dx = 0; dx < l.kw; ++dx) {
                    const int sx = x + dx - pw;
                    if (sx < 0 || sx >= th) continue;
                    const std::size_t s =
                        (static_cast<std::size_t>(b) * th * th + sy * th + sx) *
                            tail.c +
                        i;
                    const std::size_t wi =
                        l.w_off + (static_cast<std::size_t>(dy) * l.kw + dx) *
                                      tail.c +
                        i;
                    grads[wi] += in[s] * dz;
                    din[s] += params_[wi] * dz;
                  }
                }
              }
            }
          }
        }
        return;
      }
      case EdgeKind::kConv:
      case EdgeKind::kPointwise: {
        const LayerSpec& l = plan_.layers[ep.layer];
        const auto& out = edge_act_[ei];
        const std::size_t rows = static_cast<std::size_t>(n_) * th * th;
        dz_.assign(rows * l.c_out, Scalar(0));
        for (std::size_t i = 0; i < dz_.size(); ++i) {
          if (out[i] > Scalar(0)) dz_[i] = dout[i];
        }
        if (l.has_bias) {
          CMapM<Scalar> dzm(dz_.data(), static_cast<Eigen::Index>(rows), l.c_out);
          MapM<Scalar> dbm(grads.data() + l.b_off, 1, l.c_out);
          dbm.noalias() += dzm.colwise().sum();
        }
        const std::size_t k = static_cast<std::size_t>(l.kh) * l.kw * tail.c;
        im2col(node_act_[ep.tail].data(), n_, th, th, tail.c, l.kh, l.kw, col_);
        CMapM<Scalar> colm(col_.data(), static_cast<Eigen::Index>(rows),
                           static_cast<Eigen::Index>(k));
        CMapM<Scalar> dzm(dz_.data(), static_cast<Eigen::Index>(rows), l.c_out);
        MapM<Scalar> dwm(grads.data() + l.w_off, static_cast<Eigen::Index>(k),
                         l.c_out);
        dwm.noalias() += colm.transpose() * dzm;
        CMapM<Scalar> wm(params_.data() + l.w_off, static_cast<Eigen::Index>(k),
                         l.c_out);
        dcol_.assign(rows * k, Scalar(0));
        MapM<Scalar> dcolm(dcol_.data(), static_cast<Eigen::Index>(rows),
                           static_cast<Eigen::Index>(k));
        dcolm.noalias() = dzm * wm.transpose();
        col2im_add(dcol_.data(), n_, th, th, tail.c, l.kh, l.kw, din);
        return;
      }
    }
    throw std::logic_error("trainer: unhandled edge kind");
  }

  double head_loss(const Dataset& data, const std::vector<int>& indices) {
    const NodePlan& np = plan_.nodes[plan_.head_node];
    const int h = h0_ >> np.pool_level;
    const int hw = h * h;
    const int n = n_;
    feat_.assign(static_cast<std::size_t>(n) * plan_.head_c, Scalar(0));
    const auto& act = node_act_[plan_.head_node];
    const Scalar inv = Scalar(1) / Scalar(hw);
    for (int b = 0; b < n; ++b) {
      Scalar* f = feat_.data() + static_cast<std::size_t>(b) * np.c;
      for (int p = 0; p < hw; ++p) {
        const Scalar* src =
            act.data() + (static_cast<std::size_t>(b) * hw + p) * np.c;
        for (int i = 0; i < np.c; ++i) f[i] += src[i] * inv;
      }
    }
    probs_.assign(static_cast<std::size_t>(n) * plan_.classes, Scalar(0));
    CMapM<Scalar> feat(feat_.data(), n, plan_.head_c);
    CMapM<Scalar> head_w(params_.data() + plan_.head_w_off, plan_.head_c,
                         plan_.classes);
    MapM<Scalar> logits(probs_.data(), n, plan_.classes);
    logits.noalias() = feat * head_w;
    for (int b = 0; b < n; ++b) {
      for (int k = 0; k < plan_.classes; ++k) {
        logits(b, k) += params_[plan_.head_b_off + k];
      }
    }
    double loss = 0.0;
    correct_ = 0;
    for (int b = 0; b < n; ++b) {
      Scalar mx = logits(b, 0);
      int argmax = 0;
      for (int k = 1; k < plan_.classes; ++k) {
        if (logits(b, k) > mx) {
          mx = logits(b, k);
          argmax = k;
        }
      }
      Scalar z = Scalar(0);
      for (int k = 0; k < plan_.classes; ++k) {
        z += std::exp(logits(b, k) - mx);
      }
      const int label = data.labels[indices[b]];
      if (label < 0 || label >= plan_.classes) {
        throw IncompatibilityError("trainer: label outside the head's range");
      }
      loss += -static_cast<double>(logits(b, label) - mx - std::log(z));
      if (argmax == label) ++correct_;
      // Convert logits to probabilities in place for backward.
      for (int k = 0; k < plan_.classes; ++k) {
        logits(b, k) = std::exp(logits(b, k) - mx) / z;
      }
    }
    return loss / n;
  }

 public:
  int correct_in_last_batch() const { return correct_; }

 private:
  const Plan& plan_;
  std::vector<Scalar> params_;
  int n_ = 0;
  int h0_ = 0;
  int correct_ = 0;
  std::vector<std::vector<Scalar>> node_act_;
  std::vector<std::vector<Scalar>> edge_act_;
  std::vector<std::vector<Scalar>> node_grad_;
  std::vector<Scalar> feat_, dfeat_, probs_, col_, dcol_, dz_, dedge_;
};

}  // namespace

Dataset make_dataset(const DatasetConfig& config, std::uint64_t seed) {
  if (config.image_size < 1 || config.channels < 1 || config.num_classes < 2 ||
      config.samples < config.num_classes || !(config.noise_std >= 0.0)) {
    throw std::invalid_argument("make_dataset: bad dataset config");
  }
  Dataset d;
  d.image_size = config.image_size;
  d.channels = config.channels;
  d.num_classes = config.num_classes;
  d.samples = config.samples;
  const std::size_t pixels = static_cast<std::size_t>(config.image_size) *
                             config.image_size * config.channels;
  std::vector<std::vector<double>> means(config.num_classes);
  for (int c = 0; c < config.num_classes; ++c) {
    Rng rng(Rng::mix(seed, 0x4d00 + c));
    means[c].resize(pixels);
    for (auto& v : means[c]) v = rng.next_gaussian();
  }
  d.images.resize(pixels * config.samples);
  d.labels.resize(config.samples);
  for (int i = 0; i < config.samples; ++i) {
    const int label = i % config.num_classes;
    d.labels[i] = label;
    Rng rng(Rng::mix(seed, 0x5a000000 + i));
    double* img = d.images.data() + pixels * i;
    for (std::size_t p = 0; p < pixels; ++p) {
      img[p] = means[label][p] + config.noise_std * rng.next_gaussian();
    }
  }
  return d;
}

struct ConvNetModel::Impl {
  const NetGraph* graph;
  Plan plan;
  std::vector<double> params;
  std::vector<double> velocity;
  int epochs_trained = 0;

  template <typename Scalar>
  void run_training(const TrainerConfig& config, int epochs,
                    const Dataset& data, SnapshotArchive& archive,
                    std::vector<double>* accuracy_out);
};

ConvNetModel::ConvNetModel(const NetGraph& g, const ChannelAssignment& a,
                           const ConcreteSizes& sizes, std::uint64_t init_seed)
    : impl_(std::make_unique<Impl>()) {
  impl_->graph = &g;
  impl_->plan = make_plan(g, a, sizes);
  Plan& plan = impl_->plan;
  impl_->params.assign(plan.total_params, 0.0);
  impl_->velocity.assign(plan.total_params, 0.0);
  for (std::size_t li = 0; li < plan.layers.size(); ++li) {
    const LayerSpec& l = plan.layers[li];
    Rng rng(Rng::mix(init_seed, li));
    const int fan_in =
        l.kh * l.kw * (l.kind == EdgeKind::kDepthwise ? 1 : l.c_in);
    const double std = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < l.w_len; ++i) {
      impl_->params[l.w_off + i] = std * rng.next_gaussian();
    }
  }
  Rng rng(Rng::mix(init_seed, plan.layers.size()));
  const double std = std::sqrt(1.0 / plan.head_c);
  for (std::size_t i = plan.head_w_off; i < plan.head_b_off; ++i) {
    impl_->params[i] = std * rng.next_gaussian();
  }
}

ConvNetModel::~ConvNetModel() = default;
ConvNetModel::ConvNetModel(ConvNetModel&&) noexcept = default;
ConvNetModel& ConvNetModel::operator=(ConvNetModel&&) noexcept = default;

const NetGraph& ConvNetModel::graph() const { return *impl_->graph; }
int ConvNetModel::input_channels() const { return impl_->plan.input_channels; }
int ConvNetModel::num_classes() const { return impl_->plan.classes; }
int ConvNetModel::epochs_trained() const { return impl_->epochs_trained; }

std::size_t ConvNetModel::num_parameters() const {
  return impl_->plan.total_params;
}

double& ConvNetModel::parameter(std::size_t i) {
  if (i >= impl_->params.size()) {
    throw std::invalid_argument("ConvNetModel::parameter: index out of range");
  }
  return impl_->params[i];
}

double ConvNetModel::batch_loss(const Dataset& data,
                                const std::vector<int>& indices) const {
  Engine<double> engine(impl_->plan, impl_->params);
  return engine.forward(data, indices, data.image_size);
}

std::vector<double> ConvNetModel::batch_gradients(
    const Dataset& data, const std::vector<int>& indices) const {
  Engine<double> engine(impl_->plan, impl_->params);
  engine.forward(data, indices, data.image_size);
  return engine.backward(data, indices);
}

ConvTensor ConvNetModel::layer_tensor(const std::string& edge_id) const {
  for (const LayerSpec& l : impl_->plan.layers) {
    if (l.edge_id != edge_id) continue;
    const int in_dim = l.kind == EdgeKind::kDepthwise ? 1 : l.c_in;
    std::vector<double> vals(impl_->params.begin() + l.w_off,
                             impl_->params.begin() + l.w_off + l.w_len);
    return ConvTensor(l.kh, l.kw, in_dim, l.c_out, std::move(vals));
  }
  throw IncompatibilityError("layer_tensor: no weight-bearing edge '" +
                             edge_id + "'");
}

std::vector<std::string> ConvNetModel::layer_ids() const {
  std::vector<std::string> ids;
  for (const LayerSpec& l : impl_->plan.layers) ids.push_back(l.edge_id);
  return ids;
}

ConvNetModel build_model(const NetGraph& g, const ChannelAssignment& a,
                         const ConcreteSizes& sizes, std::uint64_t init_seed) {
  return ConvNetModel(g, a, sizes, init_seed);
}

template <typename Scalar>
void ConvNetModel::Impl::run_training(const TrainerConfig& config, int epochs,
                                      const Dataset& data,
                                      SnapshotArchive& archive,
                                      std::vector<double>* accuracy_out) {
  std::vector<double> lr_scale(plan.total_params, 1.0);
  for (const auto& [edge_id, scale] : config.layer_lr_scale) {
    if (!(scale > 0.0)) {
      throw std::invalid_argument("train_epochs: lr scale for '" + edge_id +
                                  "' must be > 0");
    }
    bool found = false;
    for (const LayerSpec& l : plan.layers) {
      if (l.edge_id != edge_id) continue;
      for (std::size_t i = l.w_off; i < l.w_off + l.w_len + l.b_len; ++i) {
        lr_scale[i] = scale;
      }
      found = true;
    }
    if (!found) {
      throw IncompatibilityError("train_epochs: lr scale names unknown layer '" +
                                 edge_id + "'");
    }
  }

  std::vector<Scalar> scalar_velocity(velocity.begin(), velocity.end());
  Engine<Scalar> engine(plan, std::vector<Scalar>(params.begin(), params.end()));

  std::vector<int> order(data.samples);
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < epochs; ++e) {
    const int global_epoch = epochs_trained + e;
    Rng shuffle_rng(Rng::mix(config.seed, 1000003ULL + global_epoch));
    for (int i = data.samples - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.next_below(i + 1));
      std::swap(order[i], order[j]);
    }
    double loss_sum = 0.0;
    long long correct = 0;
    for (int start = 0; start < data.samples; start += config.batch_size) {
      const int n = std::min(config.batch_size, data.samples - start);
      std::vector<int> batch(order.begin() + start, order.begin() + start + n);
      const double loss = engine.forward(data, batch, data.image_size);
      if (!std::isfinite(loss)) {
        throw TrainerFailure("training diverged (non-finite loss) at epoch " +
                             std::to_string(global_epoch));
      }
      loss_sum += loss * n;
      correct += engine.correct_in_last_batch();
      const auto grads = engine.backward(data, batch);
      auto& p = engine.params();
      const Scalar momentum = static_cast<Scalar>(config.momentum);
      const Scalar wd = static_cast<Scalar>(config.weight_decay);
      for (std::size_t i = 0; i < p.size(); ++i) {
        Scalar g = grads[i];
        if (wd != Scalar(0)) g += wd * p[i];
        scalar_velocity[i] = momentum * scalar_velocity[i] + g;
        p[i] -= static_cast<Scalar>(config.learning_rate * lr_scale[i]) *
                scalar_velocity[i];
      }
    }
    archive.train_loss.push_back(loss_sum / data.samples);
    if (accuracy_out) {
      accuracy_out->push_back(static_cast<double>(correct) / data.samples);
    }
    // Snapshot: quantized weights of every weight-bearing edge.
    std::map<std::string, ConvTensor> snap;
    for (const LayerSpec& l : plan.layers) {
      const int in_dim = l.kind == EdgeKind::kDepthwise ? 1 : l.c_in;
      std::vector<double> vals(l.w_len);
      for (std::size_t i = 0; i < l.w_len; ++i) {
        vals[i] = static_cast<double>(
            static_cast<float>(engine.params()[l.w_off + i]));
      }
      snap.emplace(l.edge_id,
                   ConvTensor(l.kh, l.kw, in_dim, l.c_out, std::move(vals)));
    }
    archive.epochs.push_back(std::move(snap));
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] = static_cast<double>(engine.params()[i]);
    velocity[i] = static_cast<double>(scalar_velocity[i]);
  }
  epochs_trained += epochs;
}

SnapshotArchive train_epochs(ConvNetModel& model, const TrainerConfig& config,
                             int epochs, std::vector<double>* train_accuracy) {
  if (epochs < 1) {
    throw std::invalid_argument("train_epochs: epochs must be >= 1");
  }
  if (config.batch_size < 1 || !(config.learning_rate >= 0.0) ||
      !(config.momentum >= 0.0) || config.momentum >= 1.0 ||
      !(config.weight_decay >= 0.0)) {
    throw std::invalid_argument("train_epochs: bad optimizer config");
  }
  ConvNetModel::Impl& impl = *model.impl_;
  const Dataset data = make_dataset(config.dataset, Rng::mix(config.seed, 0xDA7A));
  if (data.channels != impl.plan.input_channels) {
    throw IncompatibilityError(
        "train_epochs: dataset has " + std::to_string(data.channels) +
        " channels, the graph source expects " +
        std::to_string(impl.plan.input_channels));
  }
  if (data.num_classes != impl.plan.classes) {
    throw IncompatibilityError(
        "train_epochs: dataset has " + std::to_string(data.num_classes) +
        " classes, the head expects " + std::to_string(impl.plan.classes));
  }

  SnapshotArchive archive;
  for (const LayerSpec& l : impl.plan.layers) {
    archive.layer_names.push_back(l.edge_id);
    const int in_dim = l.kind == EdgeKind::kDepthwise ? 1 : l.c_in;
    archive.layer_dims[l.edge_id] = {l.kh, l.kw, in_dim, l.c_out};
  }
  if (config.single_precision) {
    impl.run_training<float>(config, epochs, data, archive, train_accuracy);
  } else {
    impl.run_training<double>(config, epochs, data, archive, train_accuracy);
  }
  return archive;
}

TrialMetrics metrics_from_archive(const SnapshotArchive& archive,
                                  const NetGraph& g) {
  TrialMetrics out;
  out.train_loss = archive.train_loss;
  for (const auto& eid : g.edge_ids()) {
    const GraphEdge& e = g.edge(eid);
    if (!is_depth_changing(e.kind)) continue;
    LayerMetricsHistory history;
    for (int epoch = 0; epoch < archive.epoch_count(); ++epoch) {
      const ConvTensor& t = archive.tensor(epoch, eid);
      if (t.dim(1) != e.kh || t.dim(2) != e.kw) {
        throw IncompatibilityError(
            "metrics_from_archive: stored kernel of layer '" + eid +
            "' does not match the graph edge");
      }
      history.epochs.push_back(layer_metrics(t));
    }
    out.per_edge.emplace(eid, std::move(history));
  }
  return out;
}

SgdTrialRunner::SgdTrialRunner(const NetGraph& g, const ChannelAssignment& a,
                               TrainerConfig config)
    : g_(g), a_(a), config_(std::move(config)) {}

void SgdTrialRunner::set_archive_sink(
    std::function<void(int, const SnapshotArchive&, const std::vector<double>&)>
        sink) {
  sink_ = std::move(sink);
}

TrialMetrics SgdTrialRunner::run_trial(const ConcreteSizes& sizes, int epochs,
                                       int trial_index) {
  ConvNetModel model = build_model(
      g_, a_, sizes, Rng::mix(config_.seed, 0x7e1a1 + trial_index));
  std::vector<double> accuracy;
  const SnapshotArchive archive = train_epochs(model, config_, epochs, &accuracy);
  if (sink_) sink_(trial_index, archive, accuracy);
  return metrics_from_archive(archive, g_);
}

ReplayTrialRunner::ReplayTrialRunner(SnapshotArchive archive, const NetGraph& g,
                                     const ChannelAssignment& a)
    : archive_(std::move(archive)), g_(g), a_(a) {}

TrialMetrics ReplayTrialRunner::run_trial(const ConcreteSizes& sizes,
                                          int epochs, int trial_index) {
  // The stored dims must match what the requested widths would allocate.
  for (const auto& eid : g_.edge_ids()) {
    const GraphEdge& e = g_.edge(eid);
    if (!is_weight_bearing(e.kind)) continue;
    auto it = archive_.layer_dims.find(eid);
    if (it == archive_.layer_dims.end()) {
      throw IncompatibilityError("replay: archive has no layer '" + eid + "'");
    }
    const long long c_in = evaluate_depth(a_.node_depth.at(e.tail), sizes);
    const long long c_out =
        e.kind == EdgeKind::kDepthwise
            ? c_in
            : evaluate_depth(a_.edge_out.at(eid), sizes);
    const std::array<int, 4> want = {
        e.kh, e.kw,
        e.kind == EdgeKind::kDepthwise ? 1 : static_cast<int>(c_in),
        static_cast<int>(c_out)};
    if (it->second != want) {
      throw IncompatibilityError(
          "replay: layer '" + eid +
          "' dims in archive do not match the requested widths");
    }
  }
  if (cursor_ + epochs > archive_.epoch_count()) {
    throw TrainerFailure(
        "replay: archive exhausted at trial " + std::to_string(trial_index) +
        " (have " + std::to_string(archive_.epoch_count()) + " epochs, need " +
        std::to_string(cursor_ + epochs) + ")");
  }
  SnapshotArchive window;
  window.layer_names = archive_.layer_names;
  window.layer_dims = archive_.layer_dims;
  for (int e = 0; e < epochs; ++e) {
    window.train_loss.push_back(archive_.train_loss[cursor_ + e]);
    window.epochs.push_back(archive_.epochs[cursor_ + e]);
  }
  cursor_ += epochs;
  return metrics_from_archive(window, g_);
}

}  // namespace chanopt
