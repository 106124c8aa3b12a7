#include "attnalign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace attnalign {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// c = a * b, a is [m x k], b is [k x n], all row-major.
void mm(const double* a, const double* b, double* c, int m, int k, int n) {
  std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// da += dc * b^T where dc is [m x n], b is [k x n].
void mm_acc_dA(const double* dc, const double* b, double* da, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* dcrow = dc + static_cast<size_t>(i) * n;
    double* darow = da + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double* brow = b + static_cast<size_t>(kk) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
      darow[kk] += acc;
    }
  }
}

// db += a^T * dc where a is [m x k], dc is [m x n].
void mm_acc_dB(const double* a, const double* dc, double* db, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* dcrow = dc + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      double* dbrow = db + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
    }
  }
}

double sigmoid_scalar(double x) {
  // Split on sign so the exp argument is always nonpositive.
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor::Tensor(std::vector<int> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive");
    n *= static_cast<size_t>(d);
  }
  if (n != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str());
  }
}

Tensor Tensor::zeros(const std::vector<int>& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const std::vector<int>& shape, double v) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive");
    n *= static_cast<size_t>(d);
  }
  return Tensor(shape, std::vector<double>(n, v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::from_vector(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  const int r = static_cast<int>(rows.size());
  if (r == 0) throw DimensionError("from_rows needs at least one row");
  const int c = static_cast<int>(rows[0].size());
  std::vector<double> data;
  data.reserve(static_cast<size_t>(r) * c);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) {
      throw DimensionError("from_rows rows have uneven lengths");
    }
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

int Tensor::numel() const {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return static_cast<int>(n);
}

int Tensor::rows() const { return shape.empty() ? 1 : shape[0]; }

int Tensor::cols() const {
  if (rank() == 1) return shape[0];
  if (rank() == 2) return shape[1];
  throw DimensionError("rows/cols only defined for rank 1 or 2, got " + shape_str());
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Value Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Value{static_cast<int>(nodes_.size()) - 1};
}

Value Tape::leaf(Tensor t) {
  if (t.shape.empty()) throw DimensionError("leaf tensor needs a shape");
  check_finite(t, "leaf");
  Node n;
  n.op = Op::Leaf;
  n.out = std::move(t);
  return push(std::move(n));
}

double Tape::scalar_val(Value v) const {
  const Tensor& t = val(v);
  if (t.numel() != 1) throw ContractError("scalar_val on tensor " + t.shape_str());
  return t.data[0];
}

Value Tape::add(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.same_shape(tb), "add shapes differ: " + ta.shape_str() + " vs " + tb.shape_str());
  Node n;
  n.op = Op::Add;
  n.inputs = {a.id, b.id};
  n.out = ta;
  for (size_t i = 0; i < n.out.data.size(); ++i) n.out.data[i] += tb.data[i];
  check_finite(n.out, "add");
  return push(std::move(n));
}

Value Tape::sub(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.same_shape(tb), "sub shapes differ: " + ta.shape_str() + " vs " + tb.shape_str());
  Node n;
  n.op = Op::Sub;
  n.inputs = {a.id, b.id};
  n.out = ta;
  for (size_t i = 0; i < n.out.data.size(); ++i) n.out.data[i] -= tb.data[i];
  check_finite(n.out, "sub");
  return push(std::move(n));
}

Value Tape::mul(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.same_shape(tb), "mul shapes differ: " + ta.shape_str() + " vs " + tb.shape_str());
  Node n;
  n.op = Op::Mul;
  n.inputs = {a.id, b.id};
  n.out = ta;
  for (size_t i = 0; i < n.out.data.size(); ++i) n.out.data[i] *= tb.data[i];
  check_finite(n.out, "mul");
  return push(std::move(n));
}

Value Tape::add_scalar(Value a, double s) {
  Node n;
  n.op = Op::AddScalar;
  n.inputs = {a.id};
  n.scalar = s;
  n.out = val(a);
  for (double& v : n.out.data) v += s;
  check_finite(n.out, "add_scalar");
  return push(std::move(n));
}

Value Tape::mul_scalar(Value a, double s) {
  Node n;
  n.op = Op::MulScalar;
  n.inputs = {a.id};
  n.scalar = s;
  n.out = val(a);
  for (double& v : n.out.data) v *= s;
  check_finite(n.out, "mul_scalar");
  return push(std::move(n));
}

Value Tape::sigmoid(Value a) {
  Node n;
  n.op = Op::Sigmoid;
  n.inputs = {a.id};
  n.out = val(a);
  for (double& v : n.out.data) v = sigmoid_scalar(v);
  check_finite(n.out, "sigmoid");
  return push(std::move(n));
}

Value Tape::tanh(Value a) {
  Node n;
  n.op = Op::Tanh;
  n.inputs = {a.id};
  n.out = val(a);
  for (double& v : n.out.data) v = std::tanh(v);
  check_finite(n.out, "tanh");
  return push(std::move(n));
}

Value Tape::exp(Value a) {
  Node n;
  n.op = Op::Exp;
  n.inputs = {a.id};
  n.out = val(a);
  for (double& v : n.out.data) v = std::exp(v);
  check_finite(n.out, "exp");
  return push(std::move(n));
}

Value Tape::log(Value a) {
  Node n;
  n.op = Op::Log;
  n.inputs = {a.id};
  n.out = val(a);
  for (double& v : n.out.data) {
    if (v <= 0.0) throw DomainError("log of nonpositive value " + std::to_string(v));
    v = std::log(v);
  }
  check_finite(n.out, "log");
  return push(std::move(n));
}

Value Tape::leaky_relu(Value a, double slope) {
  Node n;
  n.op = Op::LeakyRelu;
  n.inputs = {a.id};
  n.scalar = slope;
  n.out = val(a);
  for (double& v : n.out.data) v = v >= 0.0 ? v : slope * v;
  check_finite(n.out, "leaky_relu");
  return push(std::move(n));
}

Value Tape::recip(Value a) {
  Node n;
  n.op = Op::Recip;
  n.inputs = {a.id};
  n.out = val(a);
  for (double& v : n.out.data) v = 1.0 / v;
  check_finite(n.out, "recip");
  return push(std::move(n));
}

Value Tape::matmul(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.rank() == 2 && tb.rank() == 2,
          "matmul needs rank-2 operands: " + ta.shape_str() + " vs " + tb.shape_str());
  require(ta.shape[1] == tb.shape[0],
          "matmul inner dims differ: " + ta.shape_str() + " vs " + tb.shape_str());
  Node n;
  n.op = Op::MatMul;
  n.inputs = {a.id, b.id};
  n.out = Tensor::zeros({ta.shape[0], tb.shape[1]});
  mm(ta.data.data(), tb.data.data(), n.out.data.data(), ta.shape[0], ta.shape[1], tb.shape[1]);
  check_finite(n.out, "matmul");
  return push(std::move(n));
}

Value Tape::transpose(Value a) {
  const Tensor& ta = val(a);
  require(ta.rank() == 2, "transpose needs rank 2, got " + ta.shape_str());
  const int r = ta.shape[0], c = ta.shape[1];
  Node n;
  n.op = Op::Transpose;
  n.inputs = {a.id};
  n.out = Tensor::zeros({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n.out.at(j, i) = ta.at(i, j);
  return push(std::move(n));
}

Value Tape::softmax(Value a, int axis) {
  const Tensor& ta = val(a);
  if (ta.rank() == 1) {
    if (axis != 0) throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for rank 1");
  } else if (ta.rank() == 2) {
    if (axis != 0 && axis != 1) {
      throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for rank 2");
    }
  } else {
    throw DimensionError("softmax supports rank 1 or 2, got " + ta.shape_str());
  }
  Node n;
  n.op = Op::Softmax;
  n.inputs = {a.id};
  n.axis = axis;
  n.out = ta;
  // Iterate over slices along `axis`: n_slices independent softmaxes of
  // length `len` with stride `stride`.
  const bool rowwise = (ta.rank() == 1) || axis == 1;
  const int len = rowwise ? ta.cols() : ta.shape[0];
  const int n_slices = rowwise ? (ta.rank() == 1 ? 1 : ta.shape[0]) : ta.shape[1];
  const int stride = rowwise ? 1 : ta.shape[1];
  for (int s = 0; s < n_slices; ++s) {
    double* base = n.out.data.data() + (rowwise ? static_cast<size_t>(s) * len : static_cast<size_t>(s));
    double mx = base[0];
    for (int i = 1; i < len; ++i) mx = std::max(mx, base[static_cast<size_t>(i) * stride]);
    double z = 0.0;
    for (int i = 0; i < len; ++i) {
      double& v = base[static_cast<size_t>(i) * stride];
      v = std::exp(v - mx);
      z += v;
    }
    for (int i = 0; i < len; ++i) base[static_cast<size_t>(i) * stride] /= z;
  }
  check_finite(n.out, "softmax");
  return push(std::move(n));
}

Value Tape::cross_entropy_with_logits(Value logits, int gold) {
  const Tensor& tl = val(logits);
  require(tl.rank() == 1, "cross_entropy_with_logits needs a rank-1 logit vector, got " + tl.shape_str());
  const int k = tl.shape[0];
  if (gold < 0 || gold >= k) {
    throw IndexError("gold index " + std::to_string(gold) + " out of range for " +
                     std::to_string(k) + " logits");
  }
  double mx = tl.data[0];
  for (double v : tl.data) mx = std::max(mx, v);
  double z = 0.0;
  Tensor p = tl;
  for (double& v : p.data) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : p.data) v /= z;
  const double loss = std::log(z) + mx - tl.data[static_cast<size_t>(gold)];
  Node n;
  n.op = Op::CrossEntropy;
  n.inputs = {logits.id};
  n.i0 = gold;
  n.out = Tensor::scalar(loss);
  n.aux.push_back(std::move(p));
  check_finite(n.out, "cross_entropy_with_logits");
  return push(std::move(n));
}

Value Tape::sum(Value a) {
  const Tensor& ta = val(a);
  double acc = 0.0;
  for (double v : ta.data) acc += v;
  Node n;
  n.op = Op::Sum;
  n.inputs = {a.id};
  n.out = Tensor::scalar(acc);
  check_finite(n.out, "sum");
  return push(std::move(n));
}

Value Tape::reshape(Value a, std::vector<int> shape) {
  const Tensor& ta = val(a);
  Tensor out(std::move(shape), ta.data);
  Node n;
  n.op = Op::Reshape;
  n.inputs = {a.id};
  n.out = std::move(out);
  return push(std::move(n));
}

Value Tape::concat(const std::vector<Value>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Tensor& first = val(parts[0]);
  Node n;
  n.op = Op::Concat;
  n.axis = axis;
  for (Value v : parts) n.inputs.push_back(v.id);
  if (first.rank() == 1) {
    require(axis == 0, "rank-1 concat must use axis 0");
    int total = 0;
    for (Value v : parts) {
      require(val(v).rank() == 1, "concat rank mismatch");
      total += val(v).shape[0];
    }
    n.out = Tensor::zeros({total});
    int off = 0;
    for (Value v : parts) {
      const Tensor& t = val(v);
      std::copy(t.data.begin(), t.data.end(), n.out.data.begin() + off);
      off += t.shape[0];
    }
  } else if (axis == 0) {
    const int c = first.shape[1];
    int r = 0;
    for (Value v : parts) {
      require(val(v).rank() == 2 && val(v).shape[1] == c, "concat axis 0 column mismatch");
      r += val(v).shape[0];
    }
    n.out = Tensor::zeros({r, c});
    size_t off = 0;
    for (Value v : parts) {
      const Tensor& t = val(v);
      std::copy(t.data.begin(), t.data.end(), n.out.data.begin() + off);
      off += t.data.size();
    }
  } else if (axis == 1) {
    const int r = first.shape[0];
    int c = 0;
    for (Value v : parts) {
      require(val(v).rank() == 2 && val(v).shape[0] == r, "concat axis 1 row mismatch");
      c += val(v).shape[1];
    }
    n.out = Tensor::zeros({r, c});
    int coff = 0;
    for (Value v : parts) {
      const Tensor& t = val(v);
      const int tc = t.shape[1];
      for (int i = 0; i < r; ++i) {
        std::copy(t.data.begin() + static_cast<size_t>(i) * tc,
                  t.data.begin() + static_cast<size_t>(i + 1) * tc,
                  n.out.data.begin() + static_cast<size_t>(i) * c + coff);
      }
      coff += tc;
    }
  } else {
    throw DimensionError("concat axis must be 0 or 1");
  }
  return push(std::move(n));
}

Value Tape::slice_cols(Value a, int start, int len) {
  const Tensor& ta = val(a);
  require(ta.rank() == 2, "slice_cols needs rank 2, got " + ta.shape_str());
  if (start < 0 || len <= 0 || start + len > ta.shape[1]) {
    throw IndexError("slice_cols [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of range for " + ta.shape_str());
  }
  const int r = ta.shape[0], c = ta.shape[1];
  Node n;
  n.op = Op::SliceCols;
  n.inputs = {a.id};
  n.i0 = start;
  n.i1 = len;
  n.out = Tensor::zeros({r, len});
  for (int i = 0; i < r; ++i) {
    std::copy(ta.data.begin() + static_cast<size_t>(i) * c + start,
              ta.data.begin() + static_cast<size_t>(i) * c + start + len,
              n.out.data.begin() + static_cast<size_t>(i) * len);
  }
  return push(std::move(n));
}

Value Tape::gather_rows(Value a, std::vector<int> row_indices) {
  const Tensor& ta = val(a);
  require(ta.rank() == 2, "gather_rows needs rank 2, got " + ta.shape_str());
  if (row_indices.empty()) throw IndexError("gather_rows with empty index list");
  for (int idx : row_indices) {
    if (idx < 0 || idx >= ta.shape[0]) {
      throw IndexError("gather_rows index " + std::to_string(idx) + " out of range for " +
                       ta.shape_str());
    }
  }
  const int c = ta.shape[1];
  Node n;
  n.op = Op::GatherRows;
  n.inputs = {a.id};
  n.out = Tensor::zeros({static_cast<int>(row_indices.size()), c});
  for (size_t i = 0; i < row_indices.size(); ++i) {
    std::copy(ta.data.begin() + static_cast<size_t>(row_indices[i]) * c,
              ta.data.begin() + static_cast<size_t>(row_indices[i] + 1) * c,
              n.out.data.begin() + i * c);
  }
  n.indices = std::move(row_indices);
  return push(std::move(n));
}

Value Tape::scale_by_scalar(Value a, Value s) {
  const Tensor& ts = val(s);
  require(ts.numel() == 1, "scale_by_scalar needs a scalar second operand, got " + ts.shape_str());
  Node n;
  n.op = Op::ScaleByScalar;
  n.inputs = {a.id, s.id};
  n.out = val(a);
  const double sv = ts.data[0];
  for (double& v : n.out.data) v *= sv;
  check_finite(n.out, "scale_by_scalar");
  return push(std::move(n));
}

Value Tape::layer_norm(Value x, Value gamma, Value beta, double eps) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gamma);
  const Tensor& tb = val(beta);
  require(tx.rank() == 2, "layer_norm needs rank-2 input, got " + tx.shape_str());
  const int r = tx.shape[0], d = tx.shape[1];
  require(tg.rank() == 1 && tg.shape[0] == d, "layer_norm gamma shape mismatch");
  require(tb.rank() == 1 && tb.shape[0] == d, "layer_norm beta shape mismatch");
  Node n;
  n.op = Op::LayerNorm;
  n.inputs = {x.id, gamma.id, beta.id};
  n.scalar = eps;
  n.out = Tensor::zeros({r, d});
  Tensor xhat = Tensor::zeros({r, d});
  Tensor inv_sigma = Tensor::zeros({r});
  for (int i = 0; i < r; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += tx.at(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = tx.at(i, j) - mean;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma.at(i) = is;
    for (int j = 0; j < d; ++j) {
      const double xh = (tx.at(i, j) - mean) * is;
      xhat.at(i, j) = xh;
      n.out.at(i, j) = tg.at(j) * xh + tb.at(j);
    }
  }
  n.aux.push_back(std::move(xhat));
  n.aux.push_back(std::move(inv_sigma));
  check_finite(n.out, "layer_norm");
  return push(std::move(n));
}

Value Tape::gru_step(Value xz, Value xr, Value xc, int t, Value h, Value w_hz,
                     Value w_hr, Value w_hc) {
  const Tensor& txz = val(xz);
  const Tensor& th = val(h);
  require(th.rank() == 2 && th.shape[0] == 1, "gru_step state must be [1 x d_h]");
  const int dh = th.shape[1];
  require(txz.rank() == 2 && txz.shape[1] == dh, "gru_step projection width mismatch");
  if (t < 0 || t >= txz.shape[0]) {
    throw IndexError("gru_step time index " + std::to_string(t) + " out of range");
  }
  require(val(xr).same_shape(txz) && val(xc).same_shape(txz), "gru_step projections must agree");
  for (Value w : {w_hz, w_hr, w_hc}) {
    require(val(w).rank() == 2 && val(w).shape[0] == dh && val(w).shape[1] == dh,
            "gru_step recurrent weight must be [d_h x d_h]");
  }

  const double* hrow = th.data.data();
  const double* whz = val(w_hz).data.data();
  const double* whr = val(w_hr).data.data();
  const double* whc = val(w_hc).data.data();
  const double* xzrow = txz.data.data() + static_cast<size_t>(t) * dh;
  const double* xrrow = val(xr).data.data() + static_cast<size_t>(t) * dh;
  const double* xcrow = val(xc).data.data() + static_cast<size_t>(t) * dh;

  Tensor z = Tensor::zeros({1, dh});
  Tensor r = Tensor::zeros({1, dh});
  Tensor c = Tensor::zeros({1, dh});
  std::vector<double> tmp(static_cast<size_t>(dh));

  mm(hrow, whz, tmp.data(), 1, dh, dh);
  for (int j = 0; j < dh; ++j) z.data[j] = sigmoid_scalar(xzrow[j] + tmp[j]);
  mm(hrow, whr, tmp.data(), 1, dh, dh);
  for (int j = 0; j < dh; ++j) r.data[j] = sigmoid_scalar(xrrow[j] + tmp[j]);
  std::vector<double> rh(static_cast<size_t>(dh));
  for (int j = 0; j < dh; ++j) rh[j] = r.data[j] * hrow[j];
  mm(rh.data(), whc, tmp.data(), 1, dh, dh);
  for (int j = 0; j < dh; ++j) c.data[j] = std::tanh(xcrow[j] + tmp[j]);

  Node n;
  n.op = Op::GruStep;
  n.inputs = {xz.id, xr.id, xc.id, h.id, w_hz.id, w_hr.id, w_hc.id};
  n.i0 = t;
  n.out = Tensor::zeros({1, dh});
  for (int j = 0; j < dh; ++j) {
    n.out.data[j] = (1.0 - z.data[j]) * hrow[j] + z.data[j] * c.data[j];
  }
  n.aux.push_back(std::move(z));
  n.aux.push_back(std::move(r));
  n.aux.push_back(std::move(c));
  check_finite(n.out, "gru_step");
  return push(std::move(n));
}

const Tensor& Tape::grad(Value v) {
  Node& n = node(v);
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.out.shape);
  return n.grad;
}

void Tape::backward(Value root) {
  Node& rn = node(root);
  if (rn.out.numel() != 1) {
    throw ContractError("backward root must be scalar, got " + rn.out.shape_str());
  }
  // Mark the ancestors of the root; only they receive gradient.
  std::vector<char> needed(nodes_.size(), 0);
  std::vector<int> stack{root.id};
  needed[static_cast<size_t>(root.id)] = 1;
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    for (int in : nodes_[static_cast<size_t>(id)].inputs) {
      if (!needed[static_cast<size_t>(in)]) {
        needed[static_cast<size_t>(in)] = 1;
        stack.push_back(in);
      }
    }
  }
  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (needed[i]) {
      if (n.grad.data.empty()) {
        n.grad = Tensor::zeros(n.out.shape);
      } else {
        std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
      }
    } else {
      n.grad.data.clear();
      n.grad.shape.clear();
    }
  }
  rn.grad.data[0] = 1.0;
  for (int id = root.id; id >= 0; --id) {
    if (needed[static_cast<size_t>(id)]) backward_node(id);
  }
}

void Tape::backward_node(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.op == Op::Leaf) return;
  const Tensor& g = n.grad;
  auto in_grad = [&](int slot) -> Tensor& {
    Node& src = nodes_[static_cast<size_t>(n.inputs[static_cast<size_t>(slot)])];
    if (src.grad.data.empty()) src.grad = Tensor::zeros(src.out.shape);
    return src.grad;
  };
  auto in_val = [&](int slot) -> const Tensor& {
    return nodes_[static_cast<size_t>(n.inputs[static_cast<size_t>(slot)])].out;
  };

  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::Add: {
      Tensor& ga = in_grad(0);
      Tensor& gb = in_grad(1);
      for (size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i];
        gb.data[i] += g.data[i];
      }
      break;
    }
    case Op::Sub: {
      Tensor& ga = in_grad(0);
      Tensor& gb = in_grad(1);
      for (size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i];
        gb.data[i] -= g.data[i];
      }
      break;
    }
    case Op::Mul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      Tensor& ga = in_grad(0);
      Tensor& gb = in_grad(1);
      for (size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i] * b.data[i];
        gb.data[i] += g.data[i] * a.data[i];
      }
      break;
    }
    case Op::AddScalar: {
      Tensor& ga = in_grad(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
      break;
    }
    case Op::MulScalar: {
      Tensor& ga = in_grad(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * n.scalar;
      break;
    }
    case Op::Sigmoid: {
      Tensor& ga = in_grad(0);
      for (size_t i = 0; i < g.data.size(); ++i) {
        const double y = n.out.data[i];
        ga.data[i] += g.data[i] * y * (1.0 - y);
      }
      break;
    }
    case Op::Tanh: {
      Tensor& ga = in_grad(0);
      for (size_t i = 0; i < g.data.size(); ++i) {
        const double y = n.out.data[i];
        ga.data[i] += g.data[i] * (1.0 - y * y);
      }
      break;
    }
    case Op::Exp: {
      Tensor& ga = in_grad(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * n.out.data[i];
      break;
    }
    case Op::Log: {
      const Tensor& a = in_val(0);
      Tensor& ga = in_grad(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / a.data[i];
      break;
    }
    case Op::LeakyRelu: {
      const Tensor& a = in_val(0);
      Tensor& ga = in_grad(0);
      for (size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i] * (a.data[i] >= 0.0 ? 1.0 : n.scalar);
      }
      break;
    }
    case Op::Recip: {
      Tensor& ga = in_grad(0);
      for (size_t i = 0; i < g.data.size(); ++i) {
        const double y = n.out.data[i];
        ga.data[i] -= g.data[i] * y * y;
      }
      break;
    }
    case Op::MatMul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const int m = a.shape[0], k = a.shape[1], nn = b.shape[1];
      mm_acc_dA(g.data.data(), b.data.data(), in_grad(0).data.data(), m, k, nn);
      mm_acc_dB(a.data.data(), g.data.data(), in_grad(1).data.data(), m, k, nn);
      break;
    }
    case Op::Transpose: {
      Tensor& ga = in_grad(0);
      const int r = n.out.shape[0], c = n.out.shape[1];  // out is [c_in x r_in]
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga.at(j, i) += g.at(i, j);
      break;
    }
    case Op::Softmax: {
      Tensor& ga = in_grad(0);
      const Tensor& y = n.out;
      const bool rowwise = (y.rank() == 1) || n.axis == 1;
      const int len = rowwise ? y.cols() : y.shape[0];
      const int n_slices = rowwise ? (y.rank() == 1 ? 1 : y.shape[0]) : y.shape[1];
      const int stride = rowwise ? 1 : y.shape[1];
      for (int s = 0; s < n_slices; ++s) {
        const size_t base = rowwise ? static_cast<size_t>(s) * len : static_cast<size_t>(s);
        double dot = 0.0;
        for (int i = 0; i < len; ++i) {
          const size_t k = base + static_cast<size_t>(i) * stride;
          dot += g.data[k] * y.data[k];
        }
        for (int i = 0; i < len; ++i) {
          const size_t k = base + static_cast<size_t>(i) * stride;
          ga.data[k] += y.data[k] * (g.data[k] - dot);
        }
      }
      break;
    }
    case Op::CrossEntropy: {
      Tensor& ga = in_grad(0);
      const Tensor& p = n.aux[0];
      const double up = g.data[0];
      for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += up * p.data[i];
      ga.data[static_cast<size_t>(n.i0)] -= up;
      break;
    }
    case Op::Sum: {
      Tensor& ga = in_grad(0);
      const double up = g.data[0];
      for (double& v : ga.data) v += up;
      break;
    }
    case Op::Reshape: {
      Tensor& ga = in_grad(0);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
      break;
    }
    case Op::Concat: {
      const Tensor& y = n.out;
      if (y.rank() == 1 || n.axis == 0) {
        size_t off = 0;
        for (size_t p = 0; p < n.inputs.size(); ++p) {
          Tensor& gp = in_grad(static_cast<int>(p));
          for (size_t i = 0; i < gp.data.size(); ++i) gp.data[i] += g.data[off + i];
          off += gp.data.size();
        }
      } else {
        const int r = y.shape[0], c = y.shape[1];
        int coff = 0;
        for (size_t p = 0; p < n.inputs.size(); ++p) {
          Tensor& gp = in_grad(static_cast<int>(p));
          const int tc = gp.shape[1];
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < tc; ++j)
              gp.at(i, j) += g.data[static_cast<size_t>(i) * c + coff + j];
          coff += tc;
        }
      }
      break;
    }
    case Op::SliceCols: {
      Tensor& ga = in_grad(0);
      const int r = n.out.shape[0], len = n.i1, c = ga.shape[1];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < len; ++j)
          ga.data[static_cast<size_t>(i) * c + n.i0 + j] += g.at(i, j);
      break;
    }
    case Op::GatherRows: {
      Tensor& ga = in_grad(0);
      const int c = ga.shape[1];
      for (size_t i = 0; i < n.indices.size(); ++i) {
        double* dst = ga.data.data() + static_cast<size_t>(n.indices[i]) * c;
        const double* src = g.data.data() + i * c;
        for (int j = 0; j < c; ++j) dst[j] += src[j];
      }
      break;
    }
    case Op::ScaleByScalar: {
      const Tensor& a = in_val(0);
      const double sv = in_val(1).data[0];
      Tensor& ga = in_grad(0);
      Tensor& gs = in_grad(1);
      double acc = 0.0;
      for (size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i] * sv;
        acc += g.data[i] * a.data[i];
      }
      gs.data[0] += acc;
      break;
    }
    case Op::LayerNorm: {
      const Tensor& xhat = n.aux[0];
      const Tensor& inv_sigma = n.aux[1];
      const Tensor& gamma = in_val(1);
      Tensor& gx = in_grad(0);
      Tensor& gg = in_grad(1);
      Tensor& gb = in_grad(2);
      const int r = n.out.shape[0], d = n.out.shape[1];
      for (int i = 0; i < r; ++i) {
        double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
        for (int j = 0; j < d; ++j) {
          const double dy = g.at(i, j);
          const double dxh = dy * gamma.at(j);
          gg.at(j) += dy * xhat.at(i, j);
          gb.at(j) += dy;
          m1 += dxh;
          m2 += dxh * xhat.at(i, j);
        }
        m1 /= d;
        m2 /= d;
        const double is = inv_sigma.at(i);
        for (int j = 0; j < d; ++j) {
          const double dxh = g.at(i, j) * gamma.at(j);
          gx.at(i, j) += is * (dxh - m1 - xhat.at(i, j) * m2);
        }
      }
      break;
    }
    case Op::GruStep: {
      // inputs: {xz, xr, xc, h, w_hz, w_hr, w_hc}; aux: {z, r, c}
      const Tensor& z = n.aux[0];
      const Tensor& r = n.aux[1];
      const Tensor& c = n.aux[2];
      const Tensor& h = in_val(3);
      const Tensor& whz = in_val(4);
      const Tensor& whr = in_val(5);
      const Tensor& whc = in_val(6);
      const int dh = h.shape[1];
      const int t = n.i0;

      std::vector<double> dz(static_cast<size_t>(dh)), dc(static_cast<size_t>(dh));
      std::vector<double> dh_acc(static_cast<size_t>(dh), 0.0);
      std::vector<double> da(static_cast<size_t>(dh)), rh(static_cast<size_t>(dh));
      for (int j = 0; j < dh; ++j) {
        const double up = g.data[static_cast<size_t>(j)];
        dz[static_cast<size_t>(j)] = up * (c.data[static_cast<size_t>(j)] - h.data[static_cast<size_t>(j)]);
        dc[static_cast<size_t>(j)] = up * z.data[static_cast<size_t>(j)];
        dh_acc[static_cast<size_t>(j)] = up * (1.0 - z.data[static_cast<size_t>(j)]);
        rh[static_cast<size_t>(j)] = r.data[static_cast<size_t>(j)] * h.data[static_cast<size_t>(j)];
      }

      Tensor& gxz = in_grad(0);
      Tensor& gxr = in_grad(1);
      Tensor& gxc = in_grad(2);
      Tensor& gh = in_grad(3);
      Tensor& gwhz = in_grad(4);
      Tensor& gwhr = in_grad(5);
      Tensor& gwhc = in_grad(6);

      // candidate: c = tanh(xc_t + (r .* h) W_hc)
      for (int j = 0; j < dh; ++j) {
        da[static_cast<size_t>(j)] = dc[static_cast<size_t>(j)] * (1.0 - c.data[static_cast<size_t>(j)] * c.data[static_cast<size_t>(j)]);
        gxc.data[static_cast<size_t>(t) * dh + j] += da[static_cast<size_t>(j)];
      }
      mm_acc_dB(rh.data(), da.data(), gwhc.data.data(), 1, dh, dh);
      std::vector<double> drh(static_cast<size_t>(dh), 0.0);
      mm_acc_dA(da.data(), whc.data.data(), drh.data(), 1, dh, dh);
      std::vector<double> dr(static_cast<size_t>(dh));
      for (int j = 0; j < dh; ++j) {
        dr[static_cast<size_t>(j)] = drh[static_cast<size_t>(j)] * h.data[static_cast<size_t>(j)];
        dh_acc[static_cast<size_t>(j)] += drh[static_cast<size_t>(j)] * r.data[static_cast<size_t>(j)];
      }

      // reset gate: r = sigmoid(xr_t + h W_hr)
      for (int j = 0; j < dh; ++j) {
        const double rv = r.data[static_cast<size_t>(j)];
        da[static_cast<size_t>(j)] = dr[static_cast<size_t>(j)] * rv * (1.0 - rv);
        gxr.data[static_cast<size_t>(t) * dh + j] += da[static_cast<size_t>(j)];
      }
      mm_acc_dB(h.data.data(), da.data(), gwhr.data.data(), 1, dh, dh);
      mm_acc_dA(da.data(), whr.data.data(), dh_acc.data(), 1, dh, dh);

      // update gate: z = sigmoid(xz_t + h W_hz)
      for (int j = 0; j < dh; ++j) {
        const double zv = z.data[static_cast<size_t>(j)];
        da[static_cast<size_t>(j)] = dz[static_cast<size_t>(j)] * zv * (1.0 - zv);
        gxz.data[static_cast<size_t>(t) * dh + j] += da[static_cast<size_t>(j)];
      }
      mm_acc_dB(h.data.data(), da.data(), gwhz.data.data(), 1, dh, dh);
      mm_acc_dA(da.data(), whz.data.data(), dh_acc.data(), 1, dh, dh);

      for (int j = 0; j < dh; ++j) gh.data[static_cast<size_t>(j)] += dh_acc[static_cast<size_t>(j)];
      break;
    }
  }
}

double finite_diff_check(const std::function<Value(Tape&, Value)>& f,
                         const Tensor& x, double h) {
  Tape tape;
  Value vx = tape.leaf(x);
  Value root = f(tape, vx);
  if (tape.val(root).numel() != 1) {
    throw ContractError("finite_diff_check graph must produce a scalar");
  }
  tape.backward(root);
  const Tensor analytic = tape.grad(vx);

  auto eval_at = [&](const Tensor& point) {
    Tape t;
    Value v = t.leaf(point);
    Value r = f(t, v);
    return t.scalar_val(r);
  };

  double worst = 0.0;
  Tensor probe = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double up = eval_at(probe);
    probe.data[i] = orig - h;
    const double dn = eval_at(probe);
    probe.data[i] = orig;
    const double numeric = (up - dn) / (2.0 * h);
    const double a = analytic.data[i];
    if (!std::isfinite(numeric)) throw NumericError("non-finite central difference");
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace attnalign
