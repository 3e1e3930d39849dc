#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <thread>
#include <vector>

#include "fedsup/data.hpp"
#include "fedsup/model.hpp"
#include "fedsup/objectives.hpp"

namespace fedsup {

enum class FedAlgorithm { kFedAvg, kFedProx, kFedAvgM };
enum class LrSchedule { kConstant, kRsqrtTotal };

struct RoundConfig {
  int local_epochs = 1;          // E
  int batch_size = 8;            // B
  double learning_rate = 0.05;   // eta
  LrSchedule schedule = LrSchedule::kConstant;
  int total_rounds = 1;          // T, used by the rsqrt-total schedule
  double participation = 1.0;    // rho
  FedAlgorithm algorithm = FedAlgorithm::kFedAvg;
  double prox_mu = 0.0;          // FedProx
  double server_momentum = 0.0;  // FedAvgM beta
  LossWeights loss_weights;      // per-tap alpha/lambda
  int ne_channels = 0;           // 0 = all channels at each tap

  void validate() const {
    if (local_epochs < 1) throw ConfigError("local epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    // zero is a valid null step at this level; experiment configs insist on > 0
    if (learning_rate < 0) throw ConfigError("learning rate must be nonnegative");
    if (total_rounds < 1) throw ConfigError("total rounds must be at least 1");
    if (participation <= 0 || participation > 1)
      throw ConfigError("participation fraction must be in (0,1]");
    if (prox_mu < 0) throw ConfigError("proximal coefficient must be nonnegative");
    if (server_momentum < 0 || server_momentum >= 1)
      throw ConfigError("server momentum must be in [0,1)");
    loss_weights.validate();
  }

  // The rsqrt schedule divides the base step by sqrt(total rounds); it does
  // not decay within a run.
  double effective_lr() const {
    return schedule == LrSchedule::kConstant
               ? learning_rate
               : learning_rate / std::sqrt(static_cast<double>(total_rounds));
  }
};

template <typename T>
struct VehicleState {
  int id = 0;
  std::shared_ptr<const Dataset> data;
  std::vector<int> samples;  // indices into the shared dataset
  SegNet<T> net;             // theta_n
  AdapterStack<T> adapters;  // phi_n

  size_t sample_count() const { return samples.size(); }
};

template <typename T>
struct ServerState {
  int round = 0;
  ParamSet<T> model_params;    // theta^t
  ParamSet<T> adapter_params;  // phi^t
  ParamSet<T> momentum;        // FedAvgM buffer, lazily initialized
  // aggregation history: per round, (vehicle id, weight) pairs in id order
  std::vector<std::vector<std::pair<int, double>>> history;
};

template <typename T>
struct Upload {
  int vehicle_id = 0;
  size_t sample_count = 0;
  ParamSet<T> model_params;
  ParamSet<T> adapter_params;
};

struct VehicleRoundTrace {
  int vehicle_id = 0;
  double weight = 0.0;
  std::vector<LossBreakdown> batches;

  LossBreakdown mean() const {
    LossBreakdown m;
    if (batches.empty()) return m;
    m.mi.assign(batches[0].mi.size(), 0.0);
    m.ne.assign(batches[0].ne.size(), 0.0);
    for (const auto& b : batches) {
      m.ce += b.ce;
      m.total += b.total;
      for (size_t i = 0; i < m.mi.size(); ++i) m.mi[i] += b.mi[i];
      for (size_t i = 0; i < m.ne.size(); ++i) m.ne[i] += b.ne[i];
    }
    const double inv = 1.0 / static_cast<double>(batches.size());
    m.ce *= inv;
    m.total *= inv;
    for (auto& v : m.mi) v *= inv;
    for (auto& v : m.ne) v *= inv;
    return m;
  }
};

// Uniform sample without replacement of ceil(rho * N) vehicle ids, returned in
// ascending order. Deterministic in the stream state.
inline std::vector<int> sample_participants(int fleet_size, double rho, RngStream& rng) {
  if (fleet_size < 1) throw ContractError("cannot sample participants from an empty fleet");
  if (rho <= 0 || rho > 1) throw ContractError("participation fraction must be in (0,1]");
  const int k = static_cast<int>(std::ceil(rho * fleet_size));
  std::vector<int> ids(fleet_size);
  for (int i = 0; i < fleet_size; ++i) ids[i] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(fleet_size - i)));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Copies values of `src` into `dst`, validating names and shapes.
template <typename T>
void load_params(ParamSet<T>& dst, const ParamSet<T>& src) {
  if (dst.size() != src.size())
    throw ProtocolError("parameter set size mismatch: " + std::to_string(dst.size()) + " vs " +
                        std::to_string(src.size()));
  for (size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].tensor.shape() != src[i].tensor.shape())
      throw ProtocolError("parameter shape mismatch for " + dst[i].name);
    dst[i].tensor.data() = src[i].tensor.data();
  }
}

// One vehicle's local pass: initialize from the broadcast parameters, run E
// epochs of minibatch SGD on the unified objective, adapters updated before
// the model from the same backward pass. FedProx adds mu * (theta - theta^t)
// to the model gradient. Returns the per-batch loss trace.
template <typename T>
VehicleRoundTrace local_train(VehicleState<T>& vehicle, const ParamSet<T>& global_model,
                              const ParamSet<T>& global_adapters, const RoundConfig& config,
                              const std::vector<int>& taps, RngStream rng) {
  config.validate();
  if (vehicle.samples.empty())
    throw ContractError("vehicle " + std::to_string(vehicle.id) + " has no data");

  load_params(vehicle.net.params(), global_model);
  load_params(vehicle.adapters.params(), global_adapters);
  vehicle.net.set_requires_grad(true);
  vehicle.adapters.set_requires_grad(true);

  const T lr = static_cast<T>(config.effective_lr());
  const bool prox = config.algorithm == FedAlgorithm::kFedProx && config.prox_mu != 0;

  VehicleRoundTrace trace;
  trace.vehicle_id = vehicle.id;
  std::vector<int> order = vehicle.samples;
  for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.size());
    const size_t total = order.size();
    int batch_index = 0;
    for (size_t first = 0; first < total; first += config.batch_size, ++batch_index) {
      const size_t count = std::min(static_cast<size_t>(config.batch_size), total - first);
      auto [images, labels] = make_batch<T>(*vehicle.data, order, first, count);

      vehicle.net.zero_grad();
      vehicle.adapters.zero_grad();
      Tape<T> tape;
      auto [logits, acts] = vehicle.net.forward_with_taps(tape, tape.constant(images), taps);
      auto vars = build_total_loss(tape, logits, acts, vehicle.adapters, labels,
                                   config.loss_weights, config.ne_channels);
      auto breakdown = read_breakdown(tape, vars, config.loss_weights);
      if (!std::isfinite(breakdown.total))
        throw NonFiniteLossError(vehicle.id, epoch, batch_index);
      trace.batches.push_back(std::move(breakdown));
      tape.backward(vars.total);

      if (prox) {
        auto& params = vehicle.net.params();
        for (size_t p = 0; p < params.size(); ++p) {
          auto& t = params[p].tensor;
          const auto& g = global_model[p].tensor;
          for (int64_t i = 0; i < t.size(); ++i)
            t.grad[i] += static_cast<T>(config.prox_mu) * (t[i] - g[i]);
        }
      }

      // adapter step first, then the model, both from this backward pass
      for (auto& p : vehicle.adapters.params())
        for (int64_t i = 0; i < p.tensor.size(); ++i) p.tensor[i] -= lr * p.tensor.grad[i];
      for (auto& p : vehicle.net.params())
        for (int64_t i = 0; i < p.tensor.size(); ++i) p.tensor[i] -= lr * p.tensor.grad[i];
    }
  }
  return trace;
}

// Sample-count aggregation weights over the uploads, ascending vehicle id.
inline std::vector<std::pair<int, double>> aggregation_weights(
    const std::vector<std::pair<int, size_t>>& counts) {
  double total = 0;
  for (const auto& [id, n] : counts) {
    if (n == 0) throw ProtocolError("vehicle " + std::to_string(id) + " uploaded zero samples");
    total += static_cast<double>(n);
  }
  std::vector<std::pair<int, double>> weights;
  weights.reserve(counts.size());
  for (const auto& [id, n] : counts)
    weights.emplace_back(id, static_cast<double>(n) / total);
  return weights;
}

// Weighted aggregation of the uploads into the next global parameters.
// Uploads are accumulated in ascending vehicle-id order so the result does not
// depend on arrival order. FedAvgM applies server momentum on the model delta.
template <typename T>
void aggregate(ServerState<T>& server, std::vector<Upload<T>> uploads,
               const RoundConfig& config) {
  if (uploads.empty()) throw ProtocolError("aggregate called with no uploads");
  std::sort(uploads.begin(), uploads.end(),
            [](const Upload<T>& a, const Upload<T>& b) { return a.vehicle_id < b.vehicle_id; });

  for (const auto& u : uploads) {
    if (u.model_params.size() != server.model_params.size())
      throw ProtocolError("vehicle " + std::to_string(u.vehicle_id) +
                          " uploaded a mismatched model parameter set");
    for (size_t i = 0; i < u.model_params.size(); ++i)
      if (u.model_params[i].tensor.shape() != server.model_params[i].tensor.shape())
        throw ProtocolError("vehicle " + std::to_string(u.vehicle_id) +
                            " uploaded a bad shape for " + server.model_params[i].name);
    if (u.adapter_params.size() != server.adapter_params.size())
      throw ProtocolError("vehicle " + std::to_string(u.vehicle_id) +
                          " uploaded a mismatched adapter parameter set");
  }

  std::vector<std::pair<int, size_t>> counts;
  counts.reserve(uploads.size());
  for (const auto& u : uploads) counts.emplace_back(u.vehicle_id, u.sample_count);
  auto weights = aggregation_weights(counts);

  ParamSet<T> model_sum = server.model_params;
  for (auto& p : model_sum)
    for (auto& v : p.tensor.data()) v = T(0);
  ParamSet<T> adapter_sum = server.adapter_params;
  for (auto& p : adapter_sum)
    for (auto& v : p.tensor.data()) v = T(0);
  for (size_t n = 0; n < uploads.size(); ++n) {
    param_axpy(model_sum, static_cast<T>(weights[n].second), uploads[n].model_params);
    param_axpy(adapter_sum, static_cast<T>(weights[n].second), uploads[n].adapter_params);
  }

  if (config.algorithm == FedAlgorithm::kFedAvgM) {
    if (server.momentum.empty()) {
      server.momentum = server.model_params;
      for (auto& p : server.momentum)
        for (auto& v : p.tensor.data()) v = T(0);
    }
    // v <- beta v + (theta^t - aggregate); theta^{t+1} <- theta^t - v
    const T beta = static_cast<T>(config.server_momentum);
    for (size_t i = 0; i < server.momentum.size(); ++i) {
      auto& v = server.momentum[i].tensor;
      const auto& cur = server.model_params[i].tensor;
      const auto& agg = model_sum[i].tensor;
      for (int64_t j = 0; j < v.size(); ++j) v[j] = beta * v[j] + (cur[j] - agg[j]);
    }
    for (size_t i = 0; i < server.model_params.size(); ++i) {
      auto& cur = server.model_params[i].tensor;
      const auto& v = server.momentum[i].tensor;
      for (int64_t j = 0; j < cur.size(); ++j) cur[j] -= v[j];
    }
  } else {
    server.model_params = std::move(model_sum);
  }
  // adapters always aggregate by plain weighted mean
  server.adapter_params = std::move(adapter_sum);
  server.history.push_back(std::move(weights));
  server.round += 1;
}

template <typename T>
struct RoundReport {
  int round = 0;
  std::vector<VehicleRoundTrace> traces;  // ascending vehicle id
  double wall_ms = 0.0;
};

template <typename T>
using RoundHook = std::function<void(const ServerState<T>&, const RoundReport<T>&)>;

// Algorithm outer loop: sample participants, broadcast, train in parallel,
// aggregate, notify. Every random choice is keyed on (master seed, round,
// vehicle id), and uploads are reduced in vehicle-id order, so the outcome is
// a pure function of (fleet, config, rounds, master seed) regardless of the
// thread count.
template <typename T>
void run_federation(std::vector<VehicleState<T>>& fleet, ServerState<T>& server,
                    const RoundConfig& config, int rounds, uint64_t master_seed, int threads,
                    const std::vector<int>& taps, const RoundHook<T>& hook = nullptr) {
  config.validate();
  if (rounds < 1) throw ContractError("federation needs at least one round");
  if (fleet.empty()) throw ContractError("federation needs at least one vehicle");
  if (threads < 1) threads = 1;
  RngStream master(master_seed);

  for (int round = 0; round < rounds; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream pstream = master.fork({0x706172, static_cast<uint64_t>(round)});
    const auto participants =
        sample_participants(static_cast<int>(fleet.size()), config.participation, pstream);

    std::vector<Upload<T>> uploads(participants.size());
    std::vector<VehicleRoundTrace> traces(participants.size());
    std::vector<std::exception_ptr> failures(participants.size());
    std::atomic<size_t> next{0};
    auto worker = [&]() {
      for (;;) {
        const size_t slot = next.fetch_add(1);
        if (slot >= participants.size()) return;
        try {
          VehicleState<T>& vehicle = fleet[participants[slot]];
          RngStream vstream = master.fork(
              {0x766568, static_cast<uint64_t>(round), static_cast<uint64_t>(vehicle.id)});
          traces[slot] = local_train(vehicle, server.model_params, server.adapter_params, config,
                                     taps, vstream);
          uploads[slot] = Upload<T>{vehicle.id, vehicle.sample_count(), vehicle.net.params(),
                                    vehicle.adapters.params()};
        } catch (...) {
          failures[slot] = std::current_exception();
        }
      }
    };
    const int nthreads = std::min<int>(threads, static_cast<int>(participants.size()));
    if (nthreads <= 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      pool.reserve(nthreads);
      for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
      for (auto& th : pool) th.join();
    }
    for (auto& f : failures)
      if (f) std::rethrow_exception(f);

    aggregate(server, std::move(uploads), config);

    if (hook) {
      RoundReport<T> report;
      report.round = round;
      for (size_t i = 0; i < traces.size(); ++i) {
        traces[i].weight = server.history.back()[i].second;
        report.traces.push_back(std::move(traces[i]));
      }
      report.wall_ms = std::chrono::duration<double, std::milli>(
                           std::chrono::steady_clock::now() - t0).count();
      hook(server, report);
    }
  }
}

}  // namespace fedsup
