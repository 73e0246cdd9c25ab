#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "das/errors.hpp"
#include "das/network.hpp"
#include "test_util.hpp"

using namespace das;
using das_test::random_tensor;

namespace {

NetworkDims small_dims() {
  return {.input_dim = 6, .d = 16, .d_ff = 32, .h_adapt = 4, .h_skip = 8,
          .classes = 3, .n = 4};
}

// Independent nested-loop evaluation of ReLU(x W_in) W_out.
std::vector<double> adapter_by_hand(const Adapter& a, const Tensor& x) {
  const std::size_t rows = x.rows(), d = x.cols();
  const std::size_t h = a.w_in.tensor().cols();
  auto xv = x.values();
  auto wi = a.w_in.tensor().values();
  auto wo = a.w_out.tensor().values();
  std::vector<double> hid(rows * h, 0.0), out(rows * d, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += xv[i * d + k] * wi[k * h + j];
      hid[i * h + j] = acc > 0.0 ? acc : 0.0;
    }
  }
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < h; ++k) acc += hid[i * h + k] * wo[k * d + j];
      out[i * d + j] = acc;
    }
  }
  return out;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/das_test_") + std::to_string(::getpid()) + "_" +
         name;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("skip mask validation and formatting") {
  SkipMask empty(4);
  CHECK(empty.count() == 0);
  CHECK(empty.to_string() == "-");
  SkipMask mask(4, {3, 1});
  CHECK(mask.contains(1));
  CHECK(mask.contains(3));
  CHECK_FALSE(mask.contains(0));
  CHECK(mask.to_string() == "1|3");
  CHECK_THROWS_AS(SkipMask(4, {4}), UsageError);
  CHECK_THROWS_AS(SkipMask(4, {1, 1}), UsageError);
}

TEST_CASE("network dims invariants enforced at construction") {
  Rng rng(1);
  NetworkDims bad = small_dims();
  bad.h_skip = 16;  // == d
  CHECK_THROWS_AS(SkippableNetwork(bad, rng), ValidationError);
  bad = small_dims();
  bad.d_ff = 8;  // == h_skip: skipping would save nothing
  CHECK_THROWS_AS(SkippableNetwork(bad, rng), ValidationError);
}

TEST_CASE("adapter zero-init contract") {
  Rng rng(5);
  Adapter a = Adapter::fresh(16, 4, rng);

  Tensor zero = Tensor::zeros({3, 16});
  Tensor out_zero = adapter_forward(a, zero);
  for (double v : out_zero.values()) CHECK(v == 0.0);

  Tensor x = random_tensor({3, 16}, rng);
  Tensor out_x = adapter_forward(a, x);
  for (double v : out_x.values()) CHECK(v == 0.0);
}

TEST_CASE("adapter forward matches hand evaluation") {
  Rng rng(9);
  Adapter a = Adapter::fresh(16, 4, rng);
  for (double& v : a.w_out.tensor().values_mut()) v = 0.3 * rng.gaussian();
  Tensor x = random_tensor({5, 16}, rng);
  Tensor out = adapter_forward(a, x);
  std::vector<double> expect = adapter_by_hand(a, x);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(std::abs(out.values()[i] - expect[i]) < 1e-12);
  }

  Tensor wrong = Tensor::zeros({2, 8});
  CHECK_THROWS_AS(adapter_forward(a, wrong), ValidationError);
}

TEST_CASE("adapted stage equals x + block(x) at zero-init") {
  Rng rng(13);
  SkippableNetwork net(small_dims(), rng);
  Tensor x = random_tensor({4, 16}, rng);
  Tensor adapted = block_forward_adapted(net.block(0), net.adapt_adapter(0), x);
  Tensor plain = add(x, net.block(0).forward(x));
  for (std::size_t i = 0; i < adapted.numel(); ++i) {
    CHECK(adapted.values()[i] == plain.values()[i]);
  }
}

TEST_CASE("near-identity block leaves the input almost unchanged") {
  Rng rng(17);
  SkippableNetwork net(small_dims(), rng);
  net.block(1).scale_output(1e-9);
  Tensor x = random_tensor({4, 16}, rng);
  Tensor out = block_forward_adapted(net.block(1), net.adapt_adapter(1), x);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    CHECK(std::abs(out.values()[i] - x.values()[i]) < 1e-6);
  }
}

TEST_CASE("adapted stage equals the sum of its three terms") {
  Rng rng(19);
  SkippableNetwork net(small_dims(), rng);
  for (double& v :
       const_cast<Adapter&>(net.adapt_adapter(2)).w_out.tensor().values_mut()) {
    v = 0.2 * rng.gaussian();
  }
  Tensor x = random_tensor({4, 16}, rng);
  Tensor out = block_forward_adapted(net.block(2), net.adapt_adapter(2), x);
  Tensor block_term = net.block(2).forward(x);
  Tensor adapter_term = adapter_forward(net.adapt_adapter(2), x);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double expect =
        x.values()[i] + block_term.values()[i] + adapter_term.values()[i];
    CHECK(std::abs(out.values()[i] - expect) < 1e-12);
  }
}

TEST_CASE("skipped stage: zero-init identity and no block compute") {
  Rng rng(23);
  SkippableNetwork net(small_dims(), rng);
  Tensor x = random_tensor({4, 16}, rng);
  Tensor out = block_forward_skipped(net.skip_adapter(0), x);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    CHECK(out.values()[i] == x.values()[i]);
  }

  // The skipped stage performs only the short-cut adapter's multiply-adds.
  MacCounterScope counter;
  block_forward_skipped(net.skip_adapter(0), x);
  const auto dims = net.dims();
  CHECK(counter.count() == 4u * 2 * dims.d * dims.h_skip);
}

TEST_CASE("skipped stage equals x + adapter_forward") {
  Rng rng(29);
  SkippableNetwork net(small_dims(), rng);
  for (double& v :
       const_cast<Adapter&>(net.skip_adapter(1)).w_out.tensor().values_mut()) {
    v = 0.2 * rng.gaussian();
  }
  Tensor x = random_tensor({4, 16}, rng);
  Tensor out = block_forward_skipped(net.skip_adapter(1), x);
  Tensor term = adapter_forward(net.skip_adapter(1), x);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    CHECK(out.values()[i] == x.values()[i] + term.values()[i]);
  }
}

TEST_CASE("forward equals manual per-stage composition for any mask") {
  Rng rng(31);
  SkippableNetwork net(small_dims(), rng);
  // Give the adapters real weights so the oracle is not trivially zero.
  for (std::size_t i = 0; i < net.n(); ++i) {
    for (double& v :
         const_cast<Adapter&>(net.adapt_adapter(i)).w_out.tensor().values_mut())
      v = 0.1 * rng.gaussian();
    for (double& v :
         const_cast<Adapter&>(net.skip_adapter(i)).w_out.tensor().values_mut())
      v = 0.1 * rng.gaussian();
  }
  Tensor x = random_tensor({3, 6}, rng);

  for (const auto& skipped : std::vector<std::vector<std::size_t>>{
           {}, {1}, {0, 2}, {0, 1, 2, 3}}) {
    SkipMask mask(net.n(), skipped);
    Tensor got = net.forward(x, mask);
    Tensor h = net.embed().forward(x);
    for (std::size_t i = 0; i < net.n(); ++i) {
      h = mask.contains(i)
              ? block_forward_skipped(net.skip_adapter(i), h)
              : block_forward_adapted(net.block(i), net.adapt_adapter(i), h);
    }
    Tensor expect = net.head().forward(h);
    CHECK(std::memcmp(got.values().data(), expect.values().data(),
                      got.numel() * sizeof(double)) == 0);
  }

  SkipMask wrong_n(net.n() + 1);
  CHECK_THROWS_AS(net.forward(x, wrong_n), UsageError);
}

TEST_CASE("zero-init network reproduces the backbone exactly") {
  Rng rng(37);
  SkippableNetwork net(small_dims(), rng);
  Tensor x = random_tensor({5, 6}, rng);

  Tensor adapted = net.forward(x, SkipMask(net.n()));
  Tensor backbone = net.backbone_forward(x);
  for (std::size_t i = 0; i < adapted.numel(); ++i) {
    CHECK(adapted.values()[i] == backbone.values()[i]);
  }

  // Fully skipped at zero-init: the identity chain from embed to head.
  std::vector<std::size_t> all(net.n());
  for (std::size_t i = 0; i < net.n(); ++i) all[i] = i;
  Tensor skipped = net.forward(x, SkipMask(net.n(), all));
  Tensor identity_chain = net.head().forward(net.embed().forward(x));
  for (std::size_t i = 0; i < skipped.numel(); ++i) {
    CHECK(skipped.values()[i] == identity_chain.values()[i]);
  }
}

TEST_CASE("prune is bit-identical to the masked forward") {
  Rng rng(41);
  SkippableNetwork net(small_dims(), rng);
  for (std::size_t i = 0; i < net.n(); ++i) {
    for (double& v :
         const_cast<Adapter&>(net.adapt_adapter(i)).w_out.tensor().values_mut())
      v = 0.1 * rng.gaussian();
    for (double& v :
         const_cast<Adapter&>(net.skip_adapter(i)).w_out.tensor().values_mut())
      v = 0.1 * rng.gaussian();
  }

  for (const auto& skipped :
       std::vector<std::vector<std::size_t>>{{}, {2}, {0, 3}}) {
    SkipMask mask(net.n(), skipped);
    PrunedNetwork pruned = net.prune(mask);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor x = random_tensor({2, 6}, rng);
      Tensor a = net.forward(x, mask);
      Tensor b = pruned.forward(x);
      CHECK(std::memcmp(a.values().data(), b.values().data(),
                        a.numel() * sizeof(double)) == 0);
    }
  }
}

TEST_CASE("pruning drops exactly the skipped frozen blocks") {
  Rng rng(43);
  SkippableNetwork net(small_dims(), rng);
  net.freeze_blocks();
  const auto dims = net.dims();
  SkipMask mask(net.n(), {1, 2});
  PrunedNetwork pruned = net.prune(mask);

  const std::size_t block_params =
      dims.d * dims.d_ff + dims.d_ff + dims.d_ff * dims.d + dims.d;
  CHECK(net.frozen_param_count() - pruned.frozen_param_count() ==
        2 * block_params);

  // Trainable side: skipped stages keep only the short-cut adapter; kept
  // stages keep only the parallel adapter.
  const std::size_t adapt_params = 2 * dims.d * dims.h_adapt;
  const std::size_t skip_params = 2 * dims.d * dims.h_skip;
  const std::size_t expected_trainable =
      dims.input_dim * dims.d + dims.d +       // embed
      dims.d * dims.classes + dims.classes +   // head
      (dims.n - 2) * adapt_params + 2 * skip_params;
  CHECK(pruned.trainable_param_count() == expected_trainable);
}

TEST_CASE("parameter accounting matches a direct tally") {
  Rng rng(47);
  SkippableNetwork net(small_dims(), rng);
  net.freeze_blocks();
  const auto dims = net.dims();
  const std::size_t embed_head = dims.input_dim * dims.d + dims.d +
                                 dims.d * dims.classes + dims.classes;
  const std::size_t adapters =
      dims.n * (2 * dims.d * dims.h_adapt + 2 * dims.d * dims.h_skip);
  const std::size_t blocks =
      dims.n * (dims.d * dims.d_ff + dims.d_ff + dims.d_ff * dims.d + dims.d);
  CHECK(net.trainable_param_count() == embed_head + adapters);
  CHECK(net.frozen_param_count() == blocks);
}

TEST_CASE("analytic flop count matches the instrumented counter") {
  Rng rng(53);
  SkippableNetwork net(small_dims(), rng);
  const auto dims = net.dims();

  for (const auto& skipped : std::vector<std::vector<std::size_t>>{
           {}, {0}, {1, 3}, {0, 1, 2, 3}}) {
    SkipMask mask(net.n(), skipped);
    const std::size_t batch = 7;
    Tensor x = random_tensor({batch, dims.input_dim}, rng);
    MacCounterScope counter;
    net.forward(x, mask);
    CHECK(counter.count() == count_flops(dims, mask, batch));
  }
}

TEST_CASE("per-layer flop delta closed form") {
  const NetworkDims dims = small_dims();
  const std::uint64_t m0 = count_flops(dims, SkipMask(dims.n), 1);
  const std::uint64_t m1 = count_flops(dims, SkipMask(dims.n, {0}), 1);
  // Skipping replaces the block and its parallel adapter with the
  // short-cut adapter.
  CHECK(m0 - m1 == 2 * dims.d * dims.d_ff + 2 * dims.d * dims.h_adapt -
                       2 * dims.d * dims.h_skip);

  std::vector<std::size_t> all(dims.n);
  for (std::size_t i = 0; i < dims.n; ++i) all[i] = i;
  const std::uint64_t all_skipped = count_flops(dims, SkipMask(dims.n, all), 1);
  CHECK(all_skipped == dims.input_dim * dims.d +
                           dims.n * 2 * dims.d * dims.h_skip +
                           dims.d * dims.classes);
}

TEST_CASE("flop report fractions") {
  const NetworkDims dims = small_dims();
  FlopReport r0 = flop_report(dims, SkipMask(dims.n));
  CHECK(r0.saved_fraction == 0.0);
  FlopReport r1 = flop_report(dims, SkipMask(dims.n, {0}));
  FlopReport r2 = flop_report(dims, SkipMask(dims.n, {0, 1}));
  CHECK(r1.saved_fraction > 0.0);
  CHECK(r2.saved_fraction > r1.saved_fraction);
}

TEST_CASE("checkpoint round-trips byte-identically") {
  Rng rng(59);
  SkippableNetwork net(small_dims(), rng);
  net.freeze_blocks();
  const std::string p1 = temp_path("ckpt1.json");
  const std::string p2 = temp_path("ckpt2.json");
  save_checkpoint(net, p1);
  SkippableNetwork loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  CHECK(read_file(p1) == read_file(p2));
  CHECK_FALSE(checkpoint_is_pruned(p1));

  // Frozen flags and forward behavior survive the round trip.
  CHECK(loaded.block(0).frozen());
  Tensor x = random_tensor({3, 6}, rng);
  SkipMask mask(net.n(), {1});
  Tensor a = net.forward(x, mask);
  Tensor b = loaded.forward(x, mask);
  CHECK(std::memcmp(a.values().data(), b.values().data(),
                    a.numel() * sizeof(double)) == 0);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("pruned checkpoint export and reload") {
  Rng rng(61);
  SkippableNetwork net(small_dims(), rng);
  net.freeze_blocks();
  SkipMask mask(net.n(), {0, 2});
  PrunedNetwork pruned = net.prune(mask);
  const std::string path = temp_path("pruned.json");
  save_pruned_checkpoint(pruned, path);
  CHECK(checkpoint_is_pruned(path));

  PrunedNetwork loaded = load_pruned_checkpoint(path);
  CHECK(loaded.final_mask() == mask);
  Tensor x = random_tensor({3, 6}, rng);
  Tensor a = pruned.forward(x);
  Tensor b = loaded.forward(x);
  CHECK(std::memcmp(a.values().data(), b.values().data(),
                    a.numel() * sizeof(double)) == 0);

  CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  std::remove(path.c_str());
}
