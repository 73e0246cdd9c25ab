#include "das/network.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "das/errors.hpp"

namespace das {

namespace {

using nlohmann::json;

void fill_gaussian(std::span<double> out, Rng& rng, double stddev) {
  for (double& v : out) v = stddev * rng.gaussian();
}

Linear linear_init(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  Linear lin;
  Tensor w = Tensor::zeros({in, out});
  fill_gaussian(w.values_mut(), rng, stddev);
  lin.w = Parameter(std::move(w));
  lin.b = Parameter(Tensor::zeros({out}));
  return lin;
}

Linear linear_clone(const Linear& src) {
  Linear out;
  out.w = Parameter(src.w.tensor().clone());
  out.b = Parameter(src.b.tensor().clone());
  return out;
}

json tensor_to_json(const Parameter& p) {
  json j;
  j["shape"] = p.tensor().shape();
  auto vals = p.tensor().values();
  j["values"] = std::vector<double>(vals.begin(), vals.end());
  j["frozen"] = p.frozen();
  return j;
}

Parameter tensor_from_json(const json& j, const std::string& name) {
  if (!j.contains("shape") || !j.contains("values") || !j.contains("frozen")) {
    throw ParseError("checkpoint: param '" + name +
                     "' missing shape/values/frozen");
  }
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> values = j.at("values").get<std::vector<double>>();
  if (shape_numel(shape) != values.size()) {
    throw ValidationError("checkpoint: param '" + name + "' has " +
                          std::to_string(values.size()) + " values for shape " +
                          shape_str(shape));
  }
  Parameter p(Tensor(std::move(shape), std::move(values)));
  if (j.at("frozen").get<bool>()) p.freeze();
  return p;
}

void expect_shape(const Parameter& p, const Shape& want,
                  const std::string& name) {
  if (p.tensor().shape() != want) {
    throw ValidationError("checkpoint: param '" + name + "' has shape " +
                          shape_str(p.tensor().shape()) + ", expected " +
                          shape_str(want));
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << text;
}

std::string block_key(std::size_t i, const char* part) {
  return "block" + std::to_string(i) + "." + part;
}

}  // namespace

// --- SkipMask ---

SkipMask::SkipMask(std::size_t n) : n_(n) {}

SkipMask::SkipMask(std::size_t n, std::vector<std::size_t> skipped)
    : n_(n), skipped_(std::move(skipped)) {
  std::sort(skipped_.begin(), skipped_.end());
  for (std::size_t i = 0; i < skipped_.size(); ++i) {
    if (skipped_[i] >= n_) {
      throw UsageError("skip mask: index " + std::to_string(skipped_[i]) +
                       " outside [0, " + std::to_string(n_) + ")");
    }
    if (i > 0 && skipped_[i] == skipped_[i - 1]) {
      throw UsageError("skip mask: duplicate index " +
                       std::to_string(skipped_[i]));
    }
  }
}

bool SkipMask::contains(std::size_t i) const {
  return std::binary_search(skipped_.begin(), skipped_.end(), i);
}

std::string SkipMask::to_string() const {
  if (skipped_.empty()) return "-";
  std::ostringstream os;
  for (std::size_t i = 0; i < skipped_.size(); ++i) {
    if (i) os << '|';
    os << skipped_[i];
  }
  return os.str();
}

// --- dims / primitives ---

void NetworkDims::validate() const {
  if (input_dim == 0 || d == 0 || d_ff == 0 || h_adapt == 0 || h_skip == 0 ||
      classes == 0 || n == 0) {
    throw ValidationError("network dims: all dimensions must be positive");
  }
  if (h_adapt >= d || h_skip >= d) {
    throw ValidationError("network dims: adapter bottleneck must be < d (got h_adapt=" +
                          std::to_string(h_adapt) + ", h_skip=" +
                          std::to_string(h_skip) + ", d=" + std::to_string(d) +
                          ")");
  }
  // Skipping must save compute: block cost 2*d*d_ff vs short-cut 2*d*h_skip.
  if (d_ff <= h_skip) {
    throw ValidationError(
        "network dims: d_ff must exceed h_skip or skipping saves nothing");
  }
}

Tensor Linear::forward(const Tensor& x) const {
  return add_bias_row(matmul(x, w.tensor()), b.tensor());
}

Adapter Adapter::fresh(std::size_t d, std::size_t h, Rng& rng) {
  Adapter a;
  Tensor w_in = Tensor::zeros({d, h});
  // Small random in, zero out: the adapter is exactly the zero map at init.
  fill_gaussian(w_in.values_mut(), rng, 1.0 / std::sqrt(double(d)));
  a.w_in = Parameter(std::move(w_in));
  a.w_out = Parameter(Tensor::zeros({h, d}));
  return a;
}

Adapter Adapter::clone() const {
  Adapter a;
  a.w_in = Parameter(w_in.tensor().clone());
  a.w_out = Parameter(w_out.tensor().clone());
  return a;
}

ResidualBlock ResidualBlock::random_init(std::size_t d, std::size_t d_ff,
                                         Rng& rng) {
  ResidualBlock b;
  b.fc1 = linear_init(d, d_ff, std::sqrt(2.0 / double(d)), rng);
  b.fc2 = linear_init(d_ff, d, std::sqrt(2.0 / double(d_ff)), rng);
  return b;
}

Tensor ResidualBlock::forward(const Tensor& x) const {
  return fc2.forward(relu(fc1.forward(x)));
}

void ResidualBlock::freeze() {
  fc1.w.freeze();
  fc1.b.freeze();
  fc2.w.freeze();
  fc2.b.freeze();
}

bool ResidualBlock::frozen() const {
  return fc1.w.frozen() && fc1.b.frozen() && fc2.w.frozen() && fc2.b.frozen();
}

ResidualBlock ResidualBlock::clone() const {
  ResidualBlock b;
  b.fc1 = linear_clone(fc1);
  b.fc2 = linear_clone(fc2);
  return b;
}

void ResidualBlock::scale_output(double factor) {
  for (double& v : fc2.w.tensor().values_mut()) v *= factor;
  for (double& v : fc2.b.tensor().values_mut()) v *= factor;
}

Tensor adapter_forward(const Adapter& a, const Tensor& x) {
  return matmul(relu(matmul(x, a.w_in.tensor())), a.w_out.tensor());
}

Tensor block_forward_adapted(const ResidualBlock& block, const Adapter& a,
                             const Tensor& x) {
  return add(add(x, block.forward(x)), adapter_forward(a, x));
}

Tensor block_forward_skipped(const Adapter& skip_adapter, const Tensor& x) {
  return add(x, adapter_forward(skip_adapter, x));
}

// --- SkippableNetwork ---

SkippableNetwork::SkippableNetwork(const NetworkDims& dims, Rng& rng)
    : dims_(dims) {
  dims_.validate();
  embed_ = linear_init(dims.input_dim, dims.d,
                       1.0 / std::sqrt(double(dims.input_dim)), rng);
  blocks_.reserve(dims.n);
  for (std::size_t i = 0; i < dims.n; ++i) {
    blocks_.push_back(ResidualBlock::random_init(dims.d, dims.d_ff, rng));
  }
  head_ = linear_init(dims.d, dims.classes, 1.0 / std::sqrt(double(dims.d)),
                      rng);
  attach_fresh_adapters(rng);
}

void SkippableNetwork::attach_fresh_adapters(Rng& rng) {
  adapt_.clear();
  skip_.clear();
  adapt_.reserve(dims_.n);
  skip_.reserve(dims_.n);
  for (std::size_t i = 0; i < dims_.n; ++i) {
    adapt_.push_back(Adapter::fresh(dims_.d, dims_.h_adapt, rng));
  }
  for (std::size_t i = 0; i < dims_.n; ++i) {
    skip_.push_back(Adapter::fresh(dims_.d, dims_.h_skip, rng));
  }
}

void SkippableNetwork::freeze_blocks() {
  for (ResidualBlock& b : blocks_) b.freeze();
}

Tensor SkippableNetwork::forward(const Tensor& x, const SkipMask& mask) const {
  if (mask.n() != dims_.n) {
    throw UsageError("forward: mask over " + std::to_string(mask.n()) +
                     " modules, network has " + std::to_string(dims_.n));
  }
  Tensor h = embed_.forward(x);
  for (std::size_t i = 0; i < dims_.n; ++i) {
    h = mask.contains(i) ? block_forward_skipped(skip_[i], h)
                         : block_forward_adapted(blocks_[i], adapt_[i], h);
  }
  return head_.forward(h);
}

Tensor SkippableNetwork::backbone_forward(const Tensor& x) const {
  Tensor h = embed_.forward(x);
  for (std::size_t i = 0; i < dims_.n; ++i) {
    h = add(h, blocks_[i].forward(h));
  }
  return head_.forward(h);
}

std::vector<Parameter> SkippableNetwork::trainable_params() const {
  std::vector<Parameter> out = head_params();
  for (const Parameter& p : adapter_params()) out.push_back(p);
  return out;
}

std::vector<Parameter> SkippableNetwork::adapter_params() const {
  std::vector<Parameter> out;
  for (const Adapter& a : adapt_) {
    out.push_back(a.w_in);
    out.push_back(a.w_out);
  }
  for (const Adapter& a : skip_) {
    out.push_back(a.w_in);
    out.push_back(a.w_out);
  }
  return out;
}

std::vector<Parameter> SkippableNetwork::head_params() const {
  return {embed_.w, embed_.b, head_.w, head_.b};
}

std::vector<Parameter> SkippableNetwork::block_params() const {
  std::vector<Parameter> out;
  for (const ResidualBlock& b : blocks_) {
    out.push_back(b.fc1.w);
    out.push_back(b.fc1.b);
    out.push_back(b.fc2.w);
    out.push_back(b.fc2.b);
  }
  return out;
}

std::vector<Parameter> SkippableNetwork::backbone_params() const {
  std::vector<Parameter> out = {embed_.w, embed_.b};
  for (const Parameter& p : block_params()) out.push_back(p);
  out.push_back(head_.w);
  out.push_back(head_.b);
  return out;
}

std::size_t SkippableNetwork::trainable_param_count() const {
  std::size_t c = 0;
  for (const Parameter& p : trainable_params()) {
    if (!p.frozen()) c += p.numel();
  }
  return c;
}

std::size_t SkippableNetwork::frozen_param_count() const {
  std::size_t c = 0;
  for (const Parameter& p : block_params()) {
    if (p.frozen()) c += p.numel();
  }
  return c;
}

void SkippableNetwork::zero_grad() {
  for (Parameter p : trainable_params()) p.zero_grad();
  for (Parameter p : block_params()) p.zero_grad();
}

PrunedNetwork SkippableNetwork::prune(const SkipMask& mask) const {
  if (mask.n() != dims_.n) {
    throw UsageError("prune: mask size mismatch");
  }
  PrunedNetwork out;
  out.dims_ = dims_;
  out.mask_ = mask;
  out.embed_ = linear_clone(embed_);
  out.head_ = linear_clone(head_);
  out.stages_.reserve(dims_.n);
  for (std::size_t i = 0; i < dims_.n; ++i) {
    PrunedNetwork::Stage st;
    st.orig_index = i;
    if (mask.contains(i)) {
      st.skipped = true;
      st.adapter = skip_[i].clone();
    } else {
      st.skipped = false;
      st.block = blocks_[i].clone();
      st.adapter = adapt_[i].clone();
    }
    out.stages_.push_back(std::move(st));
  }
  return out;
}

// --- PrunedNetwork ---

Tensor PrunedNetwork::forward(const Tensor& x) const {
  Tensor h = embed_.forward(x);
  for (const Stage& st : stages_) {
    h = st.skipped ? block_forward_skipped(st.adapter, h)
                   : block_forward_adapted(st.block, st.adapter, h);
  }
  return head_.forward(h);
}

std::vector<Parameter> PrunedNetwork::trainable_params() const {
  std::vector<Parameter> out = head_params();
  for (const Parameter& p : adapter_params()) out.push_back(p);
  return out;
}

std::vector<Parameter> PrunedNetwork::adapter_params() const {
  std::vector<Parameter> out;
  for (const Stage& st : stages_) {
    out.push_back(st.adapter.w_in);
    out.push_back(st.adapter.w_out);
  }
  return out;
}

std::vector<Parameter> PrunedNetwork::head_params() const {
  return {embed_.w, embed_.b, head_.w, head_.b};
}

std::size_t PrunedNetwork::trainable_param_count() const {
  std::size_t c = 0;
  for (const Parameter& p : trainable_params()) {
    if (!p.frozen()) c += p.numel();
  }
  return c;
}

std::size_t PrunedNetwork::frozen_param_count() const {
  std::size_t c = 0;
  for (const Stage& st : stages_) {
    if (!st.skipped) c += st.block.numel();
  }
  return c;
}

void PrunedNetwork::zero_grad() {
  for (Parameter p : trainable_params()) p.zero_grad();
}

void PrunedNetwork::attach_fresh_adapters(Rng& rng) {
  for (Stage& st : stages_) {
    st.adapter = Adapter::fresh(dims_.d, st.skipped ? dims_.h_skip
                                                    : dims_.h_adapt, rng);
  }
}

// --- FLOP accounting ---

std::uint64_t count_flops(const NetworkDims& dims, const SkipMask& mask,
                          std::size_t batch) {
  const std::uint64_t B = batch;
  std::uint64_t macs = B * dims.input_dim * dims.d;  // embed
  for (std::size_t i = 0; i < dims.n; ++i) {
    if (mask.contains(i)) {
      macs += B * 2 * dims.d * dims.h_skip;
    } else {
      macs += B * 2 * dims.d * dims.d_ff;   // frozen block
      macs += B * 2 * dims.d * dims.h_adapt;  // parallel adapter
    }
  }
  macs += B * dims.d * dims.classes;  // head
  return macs;
}

FlopReport flop_report(const NetworkDims& dims, const SkipMask& mask) {
  FlopReport r;
  r.full = count_flops(dims, SkipMask(dims.n), 1);
  r.pruned = count_flops(dims, mask, 1);
  r.saved_fraction = 1.0 - double(r.pruned) / double(r.full);
  return r;
}

// --- checkpoint IO ---

namespace {

json dims_to_json(const NetworkDims& dims) {
  json j;
  j["version"] = 1;
  j["n"] = dims.n;
  j["d"] = dims.d;
  j["d_ff"] = dims.d_ff;
  j["h_adapt"] = dims.h_adapt;
  j["h_skip"] = dims.h_skip;
  j["classes"] = dims.classes;
  return j;
}

NetworkDims dims_from_json(const json& j, std::size_t input_dim,
                           const std::string& path) {
  for (const char* field : {"version", "n", "d", "d_ff", "h_adapt", "h_skip",
                            "classes", "params"}) {
    if (!j.contains(field)) {
      throw ParseError("checkpoint " + path + ": missing field '" + field +
                       "'");
    }
  }
  if (j.at("version").get<int>() != 1) {
    throw ParseError("checkpoint " + path + ": unsupported version");
  }
  NetworkDims dims;
  dims.n = j.at("n").get<std::size_t>();
  dims.d = j.at("d").get<std::size_t>();
  dims.d_ff = j.at("d_ff").get<std::size_t>();
  dims.h_adapt = j.at("h_adapt").get<std::size_t>();
  dims.h_skip = j.at("h_skip").get<std::size_t>();
  dims.classes = j.at("classes").get<std::size_t>();
  dims.input_dim = input_dim;
  return dims;
}

void put_linear(json& params, const std::string& prefix, const Linear& lin) {
  params[prefix + ".w"] = tensor_to_json(lin.w);
  params[prefix + ".b"] = tensor_to_json(lin.b);
}

void put_adapter(json& params, const std::string& prefix, const Adapter& a) {
  params[prefix + ".w_in"] = tensor_to_json(a.w_in);
  params[prefix + ".w_out"] = tensor_to_json(a.w_out);
}

Parameter take_param(const json& params, const std::string& name) {
  if (!params.contains(name)) {
    throw ParseError("checkpoint: missing param '" + name + "'");
  }
  return tensor_from_json(params.at(name), name);
}

Linear take_linear(const json& params, const std::string& prefix,
                   const Shape& w_shape) {
  Linear lin;
  lin.w = take_param(params, prefix + ".w");
  lin.b = take_param(params, prefix + ".b");
  expect_shape(lin.w, w_shape, prefix + ".w");
  expect_shape(lin.b, {w_shape[1]}, prefix + ".b");
  return lin;
}

Adapter take_adapter(const json& params, const std::string& prefix,
                     std::size_t d, std::size_t h) {
  Adapter a;
  a.w_in = take_param(params, prefix + ".w_in");
  a.w_out = take_param(params, prefix + ".w_out");
  expect_shape(a.w_in, {d, h}, prefix + ".w_in");
  expect_shape(a.w_out, {h, d}, prefix + ".w_out");
  return a;
}

ResidualBlock take_block(const json& params, std::size_t i, std::size_t d,
                         std::size_t d_ff) {
  ResidualBlock b;
  b.fc1.w = take_param(params, block_key(i, "w1"));
  b.fc1.b = take_param(params, block_key(i, "b1"));
  b.fc2.w = take_param(params, block_key(i, "w2"));
  b.fc2.b = take_param(params, block_key(i, "b2"));
  expect_shape(b.fc1.w, {d, d_ff}, block_key(i, "w1"));
  expect_shape(b.fc1.b, {d_ff}, block_key(i, "b1"));
  expect_shape(b.fc2.w, {d_ff, d}, block_key(i, "w2"));
  expect_shape(b.fc2.b, {d}, block_key(i, "b2"));
  return b;
}

void put_block(json& params, std::size_t i, const ResidualBlock& b) {
  params[block_key(i, "w1")] = tensor_to_json(b.fc1.w);
  params[block_key(i, "b1")] = tensor_to_json(b.fc1.b);
  params[block_key(i, "w2")] = tensor_to_json(b.fc2.w);
  params[block_key(i, "b2")] = tensor_to_json(b.fc2.b);
}

}  // namespace

void save_checkpoint(const SkippableNetwork& net, const std::string& path) {
  json j = dims_to_json(net.dims());
  json params = json::object();
  put_linear(params, "embed", net.embed());
  for (std::size_t i = 0; i < net.n(); ++i) {
    put_block(params, i, net.block(i));
    put_adapter(params, "adapt" + std::to_string(i), net.adapt_adapter(i));
    put_adapter(params, "skip" + std::to_string(i), net.skip_adapter(i));
  }
  put_linear(params, "head", net.head());
  j["params"] = std::move(params);
  write_text_file(path, j.dump());
}

SkippableNetwork load_checkpoint(const std::string& path) {
  json j = read_json_file(path);
  const json& params = j.at("params");
  if (!params.contains("embed.w")) {
    throw ParseError("checkpoint " + path + ": missing param 'embed.w'");
  }
  Shape embed_shape = params.at("embed.w").at("shape").get<Shape>();
  if (embed_shape.size() != 2) {
    throw ValidationError("checkpoint " + path + ": embed.w must be 2-D");
  }
  NetworkDims dims = dims_from_json(j, embed_shape[0], path);
  dims.validate();

  SkippableNetwork net;
  net.dims_ = dims;
  net.embed_ = take_linear(params, "embed", {dims.input_dim, dims.d});
  for (std::size_t i = 0; i < dims.n; ++i) {
    net.blocks_.push_back(take_block(params, i, dims.d, dims.d_ff));
    net.adapt_.push_back(take_adapter(params, "adapt" + std::to_string(i),
                                      dims.d, dims.h_adapt));
    net.skip_.push_back(take_adapter(params, "skip" + std::to_string(i),
                                     dims.d, dims.h_skip));
  }
  net.head_ = take_linear(params, "head", {dims.d, dims.classes});
  return net;
}

void save_pruned_checkpoint(const PrunedNetwork& net, const std::string& path) {
  json j = dims_to_json(net.dims());
  j["final_mask"] = net.final_mask().skipped();
  FlopReport fr = flop_report(net.dims(), net.final_mask());
  j["flop_report"] = {{"full", fr.full},
                      {"pruned", fr.pruned},
                      {"saved_fraction", fr.saved_fraction}};
  json params = json::object();
  put_linear(params, "embed", net.embed());
  for (const PrunedNetwork::Stage& st : net.stages()) {
    if (st.skipped) {
      put_adapter(params, "skip" + std::to_string(st.orig_index), st.adapter);
    } else {
      put_block(params, st.orig_index, st.block);
      put_adapter(params, "adapt" + std::to_string(st.orig_index), st.adapter);
    }
  }
  put_linear(params, "head", net.head());
  j["params"] = std::move(params);
  write_text_file(path, j.dump());
}

PrunedNetwork load_pruned_checkpoint(const std::string& path) {
  json j = read_json_file(path);
  if (!j.contains("final_mask")) {
    throw ParseError("checkpoint " + path + ": not a pruned export");
  }
  const json& params = j.at("params");
  Shape embed_shape = params.at("embed.w").at("shape").get<Shape>();
  NetworkDims dims = dims_from_json(j, embed_shape[0], path);
  dims.validate();
  SkipMask mask(dims.n, j.at("final_mask").get<std::vector<std::size_t>>());

  PrunedNetwork net;
  net.dims_ = dims;
  net.mask_ = mask;
  net.embed_ = take_linear(params, "embed", {dims.input_dim, dims.d});
  for (std::size_t i = 0; i < dims.n; ++i) {
    PrunedNetwork::Stage st;
    st.orig_index = i;
    if (mask.contains(i)) {
      st.skipped = true;
      st.adapter = take_adapter(params, "skip" + std::to_string(i), dims.d,
                                dims.h_skip);
    } else {
      st.skipped = false;
      st.block = take_block(params, i, dims.d, dims.d_ff);
      st.adapter = take_adapter(params, "adapt" + std::to_string(i), dims.d,
                                dims.h_adapt);
    }
    net.stages_.push_back(std::move(st));
  }
  net.head_ = take_linear(params, "head", {dims.d, dims.classes});
  return net;
}

bool checkpoint_is_pruned(const std::string& path) {
  json j = read_json_file(path);
  return j.contains("final_mask");
}

}  // namespace das
