#include "consert/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "consert/errors.hpp"

namespace consert {
namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

std::size_t last_dim(const char* op, const Tensor& t) {
  if (t.rank() == 0) {
    throw DimensionError(std::string(op) + ": expected rank >= 1, got scalar");
  }
  return t.shape().back();
}

void require_binary_mask(const char* op, const Tensor& mask) {
  for (float m : mask.data()) {
    if (m != 0.0f && m != 1.0f) {
      throw ContractError(std::string(op) + ": mask values must be 0 or 1");
    }
  }
}

Shape with_last(Shape shape, std::size_t last) {
  shape.back() = last;
  return shape;
}

}  // namespace

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) const {
  if (mode_ == GradMode::kDisabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Tape::finish(const char* name, Tensor output, std::vector<Tensor> inputs,
                    std::function<void()> backward) {
  for (float v : output.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + name +
                         " (output shape " + shape_to_string(output.shape()) + ")");
    }
  }
  if (backward) {
    output.set_requires_grad(true);
    records_.push_back(Record{name, std::move(inputs), output, std::move(backward)});
  }
  return output;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  const std::size_t k_dim = last_dim("matmul", a);
  if (b.rank() != 2 || b.dim(0) != k_dim) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) +
                         " by " + shape_to_string(b.shape()));
  }
  const std::size_t rows = a.numel() / k_dim;
  const std::size_t cols = b.dim(1);
  Tensor out = Tensor::zeros(with_last(a.shape(), cols));
  {
    auto c = out.mutable_data();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> acc(cols);
    for (std::size_t i = 0; i < rows; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t k = 0; k < k_dim; ++k) {
        const double aik = ad[i * k_dim + k];
        const float* brow = bd.data() + k * cols;
        for (std::size_t j = 0; j < cols; ++j) acc[j] += aik * brow[j];
      }
      float* crow = c.data() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) crow[j] = static_cast<float>(acc[j]);
    }
  }
  std::function<void()> bw;
  if (should_record({&a, &b})) {
    bw = [a, b, out, rows, k_dim, cols]() mutable {
      auto dc = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        auto bd = b.data();
        for (std::size_t i = 0; i < rows; ++i) {
          const float* dcrow = dc.data() + i * cols;
          for (std::size_t k = 0; k < k_dim; ++k) {
            const float* brow = bd.data() + k * cols;
            float acc = 0.0f;
            for (std::size_t j = 0; j < cols; ++j) acc += dcrow[j] * brow[j];
            da[i * k_dim + k] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        auto ad = a.data();
        for (std::size_t i = 0; i < rows; ++i) {
          const float* dcrow = dc.data() + i * cols;
          for (std::size_t k = 0; k < k_dim; ++k) {
            const float aik = ad[i * k_dim + k];
            float* dbrow = db.data() + k * cols;
            for (std::size_t j = 0; j < cols; ++j) dbrow[j] += aik * dcrow[j];
          }
        }
      }
    };
  }
  return finish("matmul", out, {a, b}, std::move(bw));
}

Tensor Tape::matmul_transposed(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_transposed: cannot multiply " +
                         shape_to_string(a.shape()) + " by transpose of " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), n = b.dim(0), k_dim = a.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    auto c = out.mutable_data();
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < k_dim; ++k)
          acc += static_cast<double>(ad[i * k_dim + k]) * bd[j * k_dim + k];
        c[i * n + j] = static_cast<float>(acc);
      }
    }
  }
  std::function<void()> bw;
  if (should_record({&a, &b})) {
    bw = [a, b, out, m, n, k_dim]() mutable {
      auto dc = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        auto bd = b.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const float g = dc[i * n + j];
            for (std::size_t k = 0; k < k_dim; ++k) da[i * k_dim + k] += g * bd[j * k_dim + k];
          }
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        auto ad = a.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const float g = dc[i * n + j];
            for (std::size_t k = 0; k < k_dim; ++k) db[j * k_dim + k] += g * ad[i * k_dim + k];
          }
      }
    };
  }
  return finish("matmul_transposed", out, {a, b}, std::move(bw));
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  {
    auto o = out.mutable_data();
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + bd[i];
  }
  std::function<void()> bw;
  if (should_record({&a, &b})) {
    bw = [a, b, out]() mutable {
      auto d = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (std::size_t i = 0; i < d.size(); ++i) db[i] += d[i];
      }
    };
  }
  return finish("add", out, {a, b}, std::move(bw));
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  {
    auto o = out.mutable_data();
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * bd[i];
  }
  std::function<void()> bw;
  if (should_record({&a, &b})) {
    bw = [a, b, out]() mutable {
      auto d = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        auto bd = b.data();
        for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        auto ad = a.data();
        for (std::size_t i = 0; i < d.size(); ++i) db[i] += d[i] * ad[i];
      }
    };
  }
  return finish("mul", out, {a, b}, std::move(bw));
}

Tensor Tape::scale(const Tensor& a, float factor) {
  Tensor out = Tensor::zeros(a.shape());
  {
    auto o = out.mutable_data();
    auto ad = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * factor;
  }
  std::function<void()> bw;
  if (should_record({&a})) {
    bw = [a, out, factor]() mutable {
      auto d = out.grad();
      auto da = a.grad();
      for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i] * factor;
    };
  }
  return finish("scale", out, {a}, std::move(bw));
}

Tensor Tape::add_bias(const Tensor& a, const Tensor& bias) {
  const std::size_t n = last_dim("add_bias", a);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) +
                         " does not match " + shape_to_string(a.shape()));
  }
  const std::size_t rows = a.numel() / n;
  Tensor out = Tensor::zeros(a.shape());
  {
    auto o = out.mutable_data();
    auto ad = a.data();
    auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) o[r * n + j] = ad[r * n + j] + bd[j];
  }
  std::function<void()> bw;
  if (should_record({&a, &bias})) {
    bw = [a, bias, out, rows, n]() mutable {
      auto d = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i];
      }
      if (bias.requires_grad()) {
        auto db = bias.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) db[j] += d[r * n + j];
      }
    };
  }
  return finish("add_bias", out, {a, bias}, std::move(bw));
}

Tensor Tape::softmax(const Tensor& a) {
  const std::size_t n = last_dim("softmax", a);
  const std::size_t rows = a.numel() / n;
  Tensor out = Tensor::zeros(a.shape());
  {
    auto o = out.mutable_data();
    auto ad = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const float* x = ad.data() + r * n;
      float* y = o.data() + r * n;
      const float mx = *std::max_element(x, x + n);
      double total = 0.0;
      std::vector<double> e(n);
      for (std::size_t j = 0; j < n; ++j) {
        e[j] = std::exp(static_cast<double>(x[j]) - mx);
        total += e[j];
      }
      for (std::size_t j = 0; j < n; ++j) y[j] = static_cast<float>(e[j] / total);
    }
  }
  std::function<void()> bw;
  if (should_record({&a})) {
    bw = [a, out, rows, n]() mutable {
      auto d = out.grad();
      auto y = out.data();
      auto da = a.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        float dot = 0.0f;
        for (std::size_t j = 0; j < n; ++j) dot += d[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j)
          da[r * n + j] += y[r * n + j] * (d[r * n + j] - dot);
      }
    };
  }
  return finish("softmax", out, {a}, std::move(bw));
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                        float eps) {
  const std::size_t n = last_dim("layer_norm", x);
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gain " + shape_to_string(gain.shape()) +
                         " / bias " + shape_to_string(bias.shape()) +
                         " do not match input " + shape_to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<float> normalized(x.numel());
  std::vector<float> inv_std(rows);
  {
    auto o = out.mutable_data();
    auto xd = x.data();
    auto g = gain.data();
    auto b = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const float* row = xd.data() + r * n;
      double mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) mean += row[j];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= static_cast<double>(n);
      const double rstd = 1.0 / std::sqrt(var + eps);
      inv_std[r] = static_cast<float>(rstd);
      for (std::size_t j = 0; j < n; ++j) {
        const double xh = (row[j] - mean) * rstd;
        normalized[r * n + j] = static_cast<float>(xh);
        o[r * n + j] = static_cast<float>(xh * g[j] + b[j]);
      }
    }
  }
  std::function<void()> bw;
  if (should_record({&x, &gain, &bias})) {
    bw = [x, gain, bias, out, rows, n, normalized = std::move(normalized),
          inv_std = std::move(inv_std)]() mutable {
      auto d = out.grad();
      auto g = gain.data();
      if (gain.requires_grad() || bias.requires_grad()) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) {
            if (gain.requires_grad()) gain.grad()[j] += d[r * n + j] * normalized[r * n + j];
            if (bias.requires_grad()) bias.grad()[j] += d[r * n + j];
          }
      }
      if (x.requires_grad()) {
        auto dx = x.grad();
        std::vector<float> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          float mean_d = 0.0f, mean_dx = 0.0f;
          for (std::size_t j = 0; j < n; ++j) {
            dxhat[j] = d[r * n + j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * normalized[r * n + j];
          }
          mean_d /= static_cast<float>(n);
          mean_dx /= static_cast<float>(n);
          for (std::size_t j = 0; j < n; ++j)
            dx[r * n + j] +=
                inv_std[r] * (dxhat[j] - mean_d - normalized[r * n + j] * mean_dx);
        }
      }
    };
  }
  return finish("layer_norm", out, {x, gain, bias}, std::move(bw));
}

Tensor Tape::gelu(const Tensor& x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  Tensor out = Tensor::zeros(x.shape());
  {
    auto o = out.mutable_data();
    auto xd = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const float v = xd[i];
      o[i] = 0.5f * v * (1.0f + std::tanh(kC * (v + kA * v * v * v)));
    }
  }
  std::function<void()> bw;
  if (should_record({&x})) {
    bw = [x, out]() mutable {
      auto d = out.grad();
      auto xd = x.data();
      auto dx = x.grad();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const float v = xd[i];
        const float t = std::tanh(kC * (v + kA * v * v * v));
        const float dt = (1.0f - t * t) * kC * (1.0f + 3.0f * kA * v * v);
        dx[i] += d[i] * (0.5f * (1.0f + t) + 0.5f * v * dt);
      }
    };
  }
  return finish("gelu", out, {x}, std::move(bw));
}

Tensor Tape::embedding(const Tensor& table, std::span<const std::int32_t> ids,
                       const Shape& prefix, const std::string& table_name) {
  if (table.rank() != 2) {
    throw DimensionError("embedding: table " + table_name + " must be rank 2, got " +
                         shape_to_string(table.shape()));
  }
  if (shape_numel(prefix) != ids.size()) {
    throw DimensionError("embedding: prefix " + shape_to_string(prefix) +
                         " does not hold " + std::to_string(ids.size()) + " ids");
  }
  const std::size_t rows = table.dim(0), width = table.dim(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("embedding: id " + std::to_string(id) + " out of range for " +
                       table_name + " table with " + std::to_string(rows) + " rows");
    }
  }
  Shape shape = prefix;
  shape.push_back(width);
  Tensor out = Tensor::zeros(shape);
  {
    auto o = out.mutable_data();
    auto t = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * width, width,
                  o.data() + i * width);
  }
  std::function<void()> bw;
  if (should_record({&table})) {
    bw = [table, out, width, ids = std::vector<std::int32_t>(ids.begin(), ids.end())]() mutable {
      auto d = out.grad();
      auto dt = table.grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        float* row = dt.data() + static_cast<std::size_t>(ids[i]) * width;
        for (std::size_t j = 0; j < width; ++j) row[j] += d[i * width + j];
      }
    };
  }
  return finish("embedding", out, {table}, std::move(bw));
}

Tensor Tape::masked_mean(const Tensor& x, const Tensor& mask) {
  if (x.rank() != 3 || mask.rank() != 2 || mask.dim(0) != x.dim(0) ||
      mask.dim(1) != x.dim(1)) {
    throw DimensionError("masked_mean: input " + shape_to_string(x.shape()) +
                         " incompatible with mask " + shape_to_string(mask.shape()));
  }
  require_binary_mask("masked_mean", mask);
  const std::size_t batch = x.dim(0), len = x.dim(1), width = x.dim(2);
  std::vector<float> counts(batch, 0.0f);
  auto md = mask.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t l = 0; l < len; ++l) counts[b] += md[b * len + l];
    if (counts[b] == 0.0f) {
      throw DegenerateInputError("masked_mean: mask row " + std::to_string(b) +
                                 " selects no positions");
    }
  }
  Tensor out = Tensor::zeros({batch, width});
  {
    auto o = out.mutable_data();
    auto xd = x.data();
    std::vector<double> acc(width);
    for (std::size_t b = 0; b < batch; ++b) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t l = 0; l < len; ++l) {
        if (md[b * len + l] == 0.0f) continue;
        const float* xrow = xd.data() + (b * len + l) * width;
        for (std::size_t j = 0; j < width; ++j) acc[j] += xrow[j];
      }
      float* orow = o.data() + b * width;
      for (std::size_t j = 0; j < width; ++j) orow[j] = static_cast<float>(acc[j] / counts[b]);
    }
  }
  std::function<void()> bw;
  if (should_record({&x})) {
    bw = [x, mask, out, batch, len, width, counts = std::move(counts)]() mutable {
      auto d = out.grad();
      auto dx = x.grad();
      auto md = mask.data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t l = 0; l < len; ++l) {
          if (md[b * len + l] == 0.0f) continue;
          float* row = dx.data() + (b * len + l) * width;
          for (std::size_t j = 0; j < width; ++j) row[j] += d[b * width + j] / counts[b];
        }
    };
  }
  return finish("masked_mean", out, {x, mask}, std::move(bw));
}

Tensor Tape::l2_normalize(const Tensor& x) {
  const std::size_t n = last_dim("l2_normalize", x);
  const std::size_t rows = x.numel() / n;
  std::vector<float> norms(rows);
  Tensor out = Tensor::zeros(x.shape());
  {
    auto o = out.mutable_data();
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double sq = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        sq += static_cast<double>(xd[r * n + j]) * xd[r * n + j];
      const float norm = static_cast<float>(std::sqrt(sq));
      if (norm == 0.0f) {
        throw DegenerateInputError("l2_normalize: row " + std::to_string(r) +
                                   " has zero norm");
      }
      norms[r] = norm;
      for (std::size_t j = 0; j < n; ++j)
        o[r * n + j] = static_cast<float>(xd[r * n + j] / std::sqrt(sq));
    }
  }
  std::function<void()> bw;
  if (should_record({&x})) {
    bw = [x, out, rows, n, norms = std::move(norms)]() mutable {
      auto d = out.grad();
      auto y = out.data();
      auto dx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        float dot = 0.0f;
        for (std::size_t j = 0; j < n; ++j) dot += y[r * n + j] * d[r * n + j];
        for (std::size_t j = 0; j < n; ++j)
          dx[r * n + j] += (d[r * n + j] - y[r * n + j] * dot) / norms[r];
      }
    };
  }
  return finish("l2_normalize", out, {x}, std::move(bw));
}

Tensor Tape::cosine(const Tensor& a, const Tensor& b) {
  require_same_shape("cosine", a, b);
  const std::size_t n = last_dim("cosine", a);
  const std::size_t rows = a.numel() / n;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out = Tensor::zeros(shape);
  std::vector<float> norm_a(rows), norm_b(rows);
  {
    auto o = out.mutable_data();
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0, sa = 0.0, sb = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double x = ad[r * n + j], y = bd[r * n + j];
        dot += x * y;
        sa += x * x;
        sb += y * y;
      }
      if (sa == 0.0 || sb == 0.0) {
        throw DegenerateInputError("cosine: zero-norm vector in row " + std::to_string(r));
      }
      norm_a[r] = static_cast<float>(std::sqrt(sa));
      norm_b[r] = static_cast<float>(std::sqrt(sb));
      o[r] = static_cast<float>(dot / (std::sqrt(sa) * std::sqrt(sb)));
    }
  }
  std::function<void()> bw;
  if (should_record({&a, &b})) {
    bw = [a, b, out, rows, n, norm_a = std::move(norm_a),
          norm_b = std::move(norm_b)]() mutable {
      auto d = out.grad();
      auto c = out.data();
      auto ad = a.data();
      auto bd = b.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const float inv = 1.0f / (norm_a[r] * norm_b[r]);
        if (a.requires_grad()) {
          auto da = a.grad();
          const float ca = c[r] / (norm_a[r] * norm_a[r]);
          for (std::size_t j = 0; j < n; ++j)
            da[r * n + j] += d[r] * (bd[r * n + j] * inv - ca * ad[r * n + j]);
        }
        if (b.requires_grad()) {
          auto db = b.grad();
          const float cb = c[r] / (norm_b[r] * norm_b[r]);
          for (std::size_t j = 0; j < n; ++j)
            db[r * n + j] += d[r] * (ad[r * n + j] * inv - cb * bd[r * n + j]);
        }
      }
    };
  }
  return finish("cosine", out, {a, b}, std::move(bw));
}

Tensor Tape::concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw DimensionError("concat: scalar inputs");
  const std::size_t rows = parts.front().numel() / first.back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size() ||
        !std::equal(first.begin(), first.end() - 1, p.shape().begin())) {
      throw DimensionError("concat: shape " + shape_to_string(p.shape()) +
                           " incompatible with " + shape_to_string(first));
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  Tensor out = Tensor::zeros(with_last(first, total));
  {
    auto o = out.mutable_data();
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      auto pd = parts[p].data();
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(pd.data() + r * widths[p], widths[p], o.data() + r * total + offset);
      offset += widths[p];
    }
  }
  std::function<void()> bw;
  const bool any = std::any_of(parts.begin(), parts.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (mode_ == GradMode::kEnabled && any) {
    bw = [parts, out, rows, total, widths]() mutable {
      auto d = out.grad();
      std::size_t offset = 0;
      for (std::size_t p = 0; p < parts.size(); ++p) {
        if (parts[p].requires_grad()) {
          auto dp = parts[p].grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < widths[p]; ++j)
              dp[r * widths[p] + j] += d[r * total + offset + j];
        }
        offset += widths[p];
      }
    };
  }
  return finish("concat", out, parts, std::move(bw));
}

Tensor Tape::abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape("abs_diff", a, b);
  Tensor out = Tensor::zeros(a.shape());
  {
    auto o = out.mutable_data();
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::fabs(ad[i] - bd[i]);
  }
  std::function<void()> bw;
  if (should_record({&a, &b})) {
    bw = [a, b, out]() mutable {
      auto d = out.grad();
      auto ad = a.data();
      auto bd = b.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const float diff = ad[i] - bd[i];
        const float sign = diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
        if (a.requires_grad()) a.grad()[i] += d[i] * sign;
        if (b.requires_grad()) b.grad()[i] -= d[i] * sign;
      }
    };
  }
  return finish("abs_diff", out, {a, b}, std::move(bw));
}

Tensor Tape::cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_to_string(logits.shape()) +
                         " incompatible with " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  for (std::int32_t y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("cross_entropy: label " + std::to_string(y) +
                      " outside [0, " + std::to_string(classes) + ")");
    }
  }
  std::vector<float> probs(logits.numel());
  double total = 0.0;
  auto ld = logits.data();
  std::vector<double> e(classes);
  for (std::size_t b = 0; b < batch; ++b) {
    const float* row = ld.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      e[c] = std::exp(row[c] - mx);
      z += e[c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = static_cast<float>(e[c] / z);
    total += std::log(z) + mx - row[labels[b]];
  }
  Tensor out = Tensor::wide_scalar(total / static_cast<double>(batch));
  std::function<void()> bw;
  if (should_record({&logits})) {
    bw = [logits, out, batch, classes, probs = std::move(probs),
          labels = std::vector<std::int32_t>(labels.begin(), labels.end())]() mutable {
      const float g = out.grad()[0] / static_cast<float>(batch);
      auto dl = logits.grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < classes; ++c) {
          const float target = static_cast<std::int32_t>(c) == labels[b] ? 1.0f : 0.0f;
          dl[b * classes + c] += g * (probs[b * classes + c] - target);
        }
    };
  }
  return finish("cross_entropy", out, {logits}, std::move(bw));
}

Tensor Tape::sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  Tensor out = Tensor::wide_scalar(total);
  std::function<void()> bw;
  if (should_record({&x})) {
    bw = [x, out]() mutable {
      const float g = out.grad()[0];
      for (float& v : x.grad()) v += g;
    };
  }
  return finish("sum", out, {x}, std::move(bw));
}

Tensor Tape::contrastive_xent(const Tensor& reps, float temperature) {
  if (reps.rank() != 2 || reps.dim(0) < 2 || reps.dim(0) % 2 != 0) {
    throw DimensionError("contrastive_xent: need [2N, d] rows, got " +
                         shape_to_string(reps.shape()));
  }
  const std::size_t m = reps.dim(0), n = reps.dim(1);
  const double inv_t = 1.0 / static_cast<double>(temperature);
  auto rd = reps.data();
  std::vector<double> unit(m * n), norms(m);
  for (std::size_t r = 0; r < m; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) sq += static_cast<double>(rd[r * n + j]) * rd[r * n + j];
    if (sq == 0.0) {
      throw DegenerateInputError("contrastive_xent: row " + std::to_string(r) +
                                 " has zero norm");
    }
    norms[r] = std::sqrt(sq);
    for (std::size_t j = 0; j < n; ++j) unit[r * n + j] = rd[r * n + j] / norms[r];
  }
  // probs[i][j] over j != i, zero on the diagonal.
  std::vector<double> probs(m * m, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double* p = probs.data() + i * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t t = 0; t < n; ++t) s += unit[i * n + t] * unit[j * n + t];
      p[j] = s * inv_t;
      mx = std::max(mx, p[j]);
    }
    const double pos = p[i ^ 1u];
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < m; ++j) p[j] /= z;
    total += std::log(z) + mx - pos;
  }
  Tensor out = Tensor::wide_scalar(total / static_cast<double>(m));
  std::function<void()> bw;
  if (should_record({&reps})) {
    bw = [reps, out, m, n, inv_t, unit = std::move(unit), norms = std::move(norms),
          probs = std::move(probs)]() mutable {
      const double g = out.grad()[0] / static_cast<double>(m);
      std::vector<double> coef(m * m, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          if (j == i) continue;
          const double gij = probs[i * m + j] - (j == (i ^ 1u) ? 1.0 : 0.0);
          coef[i * m + j] += gij;
          coef[j * m + i] += gij;
        }
      auto dr = reps.grad();
      std::vector<double> du(n);
      for (std::size_t i = 0; i < m; ++i) {
        std::fill(du.begin(), du.end(), 0.0);
        for (std::size_t j = 0; j < m; ++j) {
          const double c = coef[i * m + j] * g * inv_t;
          if (c == 0.0) continue;
          for (std::size_t t = 0; t < n; ++t) du[t] += c * unit[j * n + t];
        }
        double dot = 0.0;
        for (std::size_t t = 0; t < n; ++t) dot += du[t] * unit[i * n + t];
        for (std::size_t t = 0; t < n; ++t)
          dr[i * n + t] += static_cast<float>((du[t] - unit[i * n + t] * dot) / norms[i]);
      }
    };
  }
  return finish("contrastive_xent", out, {reps}, std::move(bw));
}

Tensor Tape::fill_diagonal(const Tensor& x, float value) {
  if (x.rank() != 2 || x.dim(0) != x.dim(1)) {
    throw DimensionError("fill_diagonal: expected square matrix, got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t m = x.dim(0);
  Tensor out = Tensor::from(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  {
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < m; ++i) o[i * m + i] = value;
  }
  std::function<void()> bw;
  if (should_record({&x})) {
    bw = [x, out, m]() mutable {
      auto d = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
          if (i != j) dx[i * m + j] += d[i * m + j];
    };
  }
  return finish("fill_diagonal", out, {x}, std::move(bw));
}

Tensor Tape::self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& mask, std::size_t heads) {
  require_same_shape("self_attention", q, k);
  require_same_shape("self_attention", q, v);
  if (q.rank() != 3 || mask.rank() != 2 || mask.dim(0) != q.dim(0) ||
      mask.dim(1) != q.dim(1)) {
    throw DimensionError("self_attention: inputs " + shape_to_string(q.shape()) +
                         " incompatible with mask " + shape_to_string(mask.shape()));
  }
  const std::size_t batch = q.dim(0), len = q.dim(1), width = q.dim(2);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("self_attention: width " + std::to_string(width) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  require_binary_mask("self_attention", mask);
  const std::size_t head_dim = width / heads;
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(head_dim));
  auto md = mask.data();
  for (std::size_t b = 0; b < batch; ++b) {
    if (std::all_of(md.begin() + b * len, md.begin() + (b + 1) * len,
                    [](float m) { return m == 0.0f; })) {
      throw DegenerateInputError("self_attention: sequence " + std::to_string(b) +
                                 " has an all-zero attention mask");
    }
  }

  // probs[b][h][i][j]; zero for masked keys.
  std::vector<float> probs(batch * heads * len * len, 0.0f);
  Tensor out = Tensor::zeros(q.shape());
  {
    auto o = out.mutable_data();
    auto qd = q.data();
    auto kd = k.data();
    auto vd = v.data();
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<double> sc(len), acc(head_dim);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * head_dim;
        for (std::size_t i = 0; i < len; ++i) {
          float* p = probs.data() + ((b * heads + h) * len + i) * len;
          const float* qi = qd.data() + (b * len + i) * width + off;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < len; ++j) {
            if (md[b * len + j] == 0.0f) continue;
            const float* kj = kd.data() + (b * len + j) * width + off;
            double s = 0.0;
            for (std::size_t t = 0; t < head_dim; ++t) s += static_cast<double>(qi[t]) * kj[t];
            sc[j] = s * scale;
            mx = std::max(mx, sc[j]);
          }
          double z = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            if (md[b * len + j] == 0.0f) continue;
            sc[j] = std::exp(sc[j] - mx);
            z += sc[j];
          }
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t j = 0; j < len; ++j) {
            if (md[b * len + j] == 0.0f) continue;
            const double pj = sc[j] / z;
            p[j] = static_cast<float>(pj);
            const float* vj = vd.data() + (b * len + j) * width + off;
            for (std::size_t t = 0; t < head_dim; ++t) acc[t] += pj * vj[t];
          }
          float* oi = o.data() + (b * len + i) * width + off;
          for (std::size_t t = 0; t < head_dim; ++t) oi[t] = static_cast<float>(acc[t]);
        }
      }
  }
  std::function<void()> bw;
  if (should_record({&q, &k, &v})) {
    bw = [q, k, v, mask, out, batch, len, width, heads, head_dim, scale_factor,
          probs = std::move(probs)]() mutable {
      auto d = out.grad();
      auto qd = q.data();
      auto kd = k.data();
      auto vd = v.data();
      auto md = mask.data();
      std::span<float> dq, dk, dv;
      if (q.requires_grad()) dq = q.grad();
      if (k.requires_grad()) dk = k.grad();
      if (v.requires_grad()) dv = v.grad();
      std::vector<float> dscore(len);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * head_dim;
          for (std::size_t i = 0; i < len; ++i) {
            const float* p = probs.data() + ((b * heads + h) * len + i) * len;
            const float* di = d.data() + (b * len + i) * width + off;
            float weighted = 0.0f;
            for (std::size_t j = 0; j < len; ++j) {
              if (md[b * len + j] == 0.0f) {
                dscore[j] = 0.0f;
                continue;
              }
              const float* vj = vd.data() + (b * len + j) * width + off;
              float s = 0.0f;
              for (std::size_t t = 0; t < head_dim; ++t) s += di[t] * vj[t];
              dscore[j] = s;
              weighted += p[j] * s;
              if (!dv.empty()) {
                float* dvj = dv.data() + (b * len + j) * width + off;
                for (std::size_t t = 0; t < head_dim; ++t) dvj[t] += p[j] * di[t];
              }
            }
            const float* qi = qd.data() + (b * len + i) * width + off;
            for (std::size_t j = 0; j < len; ++j) {
              if (md[b * len + j] == 0.0f) continue;
              const float ds = p[j] * (dscore[j] - weighted) * scale_factor;
              const float* kj = kd.data() + (b * len + j) * width + off;
              if (!dq.empty()) {
                float* dqi = dq.data() + (b * len + i) * width + off;
                for (std::size_t t = 0; t < head_dim; ++t) dqi[t] += ds * kj[t];
              }
              if (!dk.empty()) {
                float* dkj = dk.data() + (b * len + j) * width + off;
                for (std::size_t t = 0; t < head_dim; ++t) dkj[t] += ds * qi[t];
              }
            }
          }
        }
    };
  }
  return finish("self_attention", out, {q, k, v, mask}, std::move(bw));
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_to_string(loss.shape()));
  }
  std::size_t end = records_.size();
  for (std::size_t i = records_.size(); i-- > 0;) {
    if (records_[i].output.same_storage(loss)) {
      end = i + 1;
      break;
    }
  }
  const bool on_tape = end <= records_.size() && end > 0 &&
                       records_[end - 1].output.same_storage(loss);
  for (const Record& r : records_) {
    for (Tensor t : r.inputs)
      if (t.requires_grad()) t.zero_grad();
    Tensor out = r.output;
    out.zero_grad();
  }
  if (!on_tape) {
    // Constant with respect to every recorded leaf.
    return;
  }
  Tensor seed = loss;
  seed.grad()[0] = 1.0f;
  for (std::size_t i = end; i-- > 0;) records_[i].backward();
}

}  // namespace consert
