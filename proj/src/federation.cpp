#include "fedscal/federation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace fedscal {

namespace {

// fixed stream tags: (seed, tag, ...) keys every logical actor
constexpr std::uint64_t kStreamSampling = 0x53616d70ULL;
constexpr std::uint64_t kStreamClient = 0x436c6e74ULL;

using nlohmann::json;

json supervision_to_json(const SupervisionCounts& s) {
    return json{{"local_gated", s.local_gated},   {"global_gated", s.global_gated},
                {"both_gated", s.both_gated},     {"local_wrong", s.local_wrong},
                {"global_wrong", s.global_wrong}, {"both_wrong", s.both_wrong}};
}

SupervisionCounts supervision_from_json(const json& j) {
    SupervisionCounts s;
    s.local_gated = j.at("local_gated").get<int>();
    s.global_gated = j.at("global_gated").get<int>();
    s.both_gated = j.at("both_gated").get<int>();
    s.local_wrong = j.at("local_wrong").get<int>();
    s.global_wrong = j.at("global_wrong").get<int>();
    s.both_wrong = j.at("both_wrong").get<int>();
    return s;
}

json batch_to_json(const BatchTrace& b) {
    return json{{"epoch", b.epoch},
                {"batch", b.batch_index},
                {"loss_total", b.loss_total},
                {"loss_entropy", b.loss_entropy},
                {"loss_diversity", b.loss_diversity},
                {"loss_pseudo_ce", b.loss_pseudo_ce},
                {"loss_symmetric_ce", b.loss_symmetric_ce},
                {"loss_client_align", b.loss_client_align},
                {"loss_server_align", b.loss_server_align},
                {"client_gated", b.client_gated},
                {"server_gated", b.server_gated},
                {"supervision", supervision_to_json(b.supervision)}};
}

BatchTrace batch_from_json(const json& j) {
    BatchTrace b;
    b.epoch = j.at("epoch").get<int>();
    b.batch_index = j.at("batch").get<int>();
    b.loss_total = j.at("loss_total").get<double>();
    b.loss_entropy = j.at("loss_entropy").get<double>();
    b.loss_diversity = j.at("loss_diversity").get<double>();
    b.loss_pseudo_ce = j.at("loss_pseudo_ce").get<double>();
    b.loss_symmetric_ce = j.at("loss_symmetric_ce").get<double>();
    b.loss_client_align = j.at("loss_client_align").get<double>();
    b.loss_server_align = j.at("loss_server_align").get<double>();
    b.client_gated = j.at("client_gated").get<int>();
    b.server_gated = j.at("server_gated").get<int>();
    b.supervision = supervision_from_json(j.at("supervision"));
    return b;
}

json round_to_json(const RoundRecord& r) {
    json clients = json::array();
    for (const ClientRoundTrace& c : r.clients) {
        json batches = json::array();
        for (const BatchTrace& b : c.batches) batches.push_back(batch_to_json(b));
        clients.push_back(json{{"client_id", c.client_id},
                               {"tau", c.tau},
                               {"gamma", c.gamma},
                               {"pacc", c.pacc},
                               {"pacc_final", c.pacc_final},
                               {"drift", c.drift},
                               {"batches", std::move(batches)}});
    }
    json domains = json::object();
    for (const auto& [id, acc] : r.domain_accuracy) domains[std::to_string(id)] = acc;
    return json{{"round", r.round},
                {"sampled", r.sampled},
                {"clients", std::move(clients)},
                {"domain_accuracy", std::move(domains)},
                {"average_accuracy", r.average_accuracy},
                {"mean_drift", r.mean_drift}};
}

RoundRecord round_from_json(const json& j) {
    RoundRecord r;
    r.round = j.at("round").get<int>();
    r.sampled = j.at("sampled").get<std::vector<int>>();
    for (const json& cj : j.at("clients")) {
        ClientRoundTrace c;
        c.client_id = cj.at("client_id").get<int>();
        c.tau = cj.at("tau").get<double>();
        c.gamma = cj.at("gamma").get<double>();
        c.pacc = cj.at("pacc").get<double>();
        c.pacc_final = cj.at("pacc_final").get<double>();
        c.drift = cj.at("drift").get<double>();
        for (const json& bj : cj.at("batches")) c.batches.push_back(batch_from_json(bj));
        r.clients.push_back(std::move(c));
    }
    for (const auto& [key, value] : j.at("domain_accuracy").items())
        r.domain_accuracy[std::stoi(key)] = value.get<double>();
    r.average_accuracy = j.at("average_accuracy").get<double>();
    r.mean_drift = j.at("mean_drift").get<double>();
    return r;
}

struct LoopState {
    ModelParams global;
    std::vector<ModelParams> locals;  // LoA only
    std::vector<RoundRecord> history;
};

std::string checkpoint_manifest_path(const std::string& dir, int round) {
    return dir + "/ckpt_" + std::to_string(round) + ".json";
}

void save_checkpoint(const FederationConfig& cfg, const LoopState& state, int round) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    const std::string base =
        cfg.checkpoint_dir + "/ckpt_" + std::to_string(round);
    save_params(state.global, base + "_global");
    json manifest;
    manifest["round"] = round;
    manifest["method"] = method_name(cfg.method);
    manifest["num_locals"] = state.locals.size();
    for (std::size_t k = 0; k < state.locals.size(); ++k)
        save_params(state.locals[k], base + "_client" + std::to_string(k));
    json rounds = json::array();
    for (const RoundRecord& r : state.history) rounds.push_back(round_to_json(r));
    manifest["history"] = std::move(rounds);
    std::ofstream os(checkpoint_manifest_path(cfg.checkpoint_dir, round));
    if (!os) throw std::runtime_error("cannot write checkpoint manifest");
    os << manifest.dump() << '\n';
}

LoopState load_checkpoint(const FederationConfig& cfg, int round) {
    std::ifstream is(checkpoint_manifest_path(cfg.checkpoint_dir, round));
    if (!is) throw std::runtime_error("cannot open checkpoint manifest");
    json manifest;
    is >> manifest;
    if (manifest.at("method").get<std::string>() != method_name(cfg.method))
        throw std::runtime_error("checkpoint method does not match configuration");
    LoopState state;
    const std::string base =
        cfg.checkpoint_dir + "/ckpt_" + std::to_string(round);
    state.global = load_params(base + "_global");
    const std::size_t n = manifest.at("num_locals").get<std::size_t>();
    for (std::size_t k = 0; k < n; ++k)
        state.locals.push_back(load_params(base + "_client" + std::to_string(k)));
    for (const json& rj : manifest.at("history"))
        state.history.push_back(round_from_json(rj));
    return state;
}

void fill_supervision(ClientUpdateResult& result, const ClientDataset& dataset) {
    if (result.batch_targets.empty()) return;
    for (std::size_t b = 0; b < result.batch_targets.size(); ++b) {
        const auto& targets = result.batch_targets[b];
        if (targets.indices.empty()) continue;
        std::vector<int> labels(targets.indices.size());
        for (std::size_t i = 0; i < targets.indices.size(); ++i)
            labels[i] = dataset.samples[targets.indices[i]].true_label;
        result.trace.batches[b].supervision =
            count_supervision(targets.client_targets, targets.server_targets, labels);
    }
    result.batch_targets.clear();
}

void run_rounds(const FederationConfig& cfg, const std::vector<ClientDataset>& clients,
                LoopState& state, int first_round) {
    const int num_clients = static_cast<int>(clients.size());
    const int q = std::min<int>(
        num_clients,
        std::max<int>(1, static_cast<int>(std::llround(cfg.participation_rate *
                                                       static_cast<double>(num_clients)))));

    for (int round = first_round; round <= cfg.rounds; ++round) {
        std::vector<int> sampled;
        if (cfg.method == Method::LoA) {
            sampled.resize(num_clients);
            for (int k = 0; k < num_clients; ++k) sampled[k] = k;
        } else {
            RngStream rng(cfg.master_seed,
                          {kStreamSampling, static_cast<std::uint64_t>(round)});
            sampled = sample_clients(num_clients, q, rng);
        }

        std::vector<ClientUpdateResult> results(sampled.size());
        auto update_one = [&](std::size_t i) {
            const int k = sampled[i];
            const ModelParams& start =
                cfg.method == Method::LoA ? state.locals[k] : state.global;
            try {
                results[i] = client_update(start, UnlabeledView(clients[k]), cfg, k, round);
            } catch (const std::exception& e) {
                throw std::runtime_error("client " + std::to_string(k) +
                                         " failed at round " + std::to_string(round) +
                                         ": " + e.what());
            }
        };
        std::exception_ptr error;
        if (cfg.execution == ExecutionMode::Parallel) {
#pragma omp parallel for schedule(dynamic)
            for (std::size_t i = 0; i < sampled.size(); ++i) {
                try {
                    update_one(i);
                } catch (...) {
#pragma omp critical
                    if (!error) error = std::current_exception();
                }
            }
        } else {
            for (std::size_t i = 0; i < sampled.size(); ++i) update_one(i);
        }
        if (error) std::rethrow_exception(error);

        for (std::size_t i = 0; i < results.size(); ++i) {
            if (!all_finite(results[i].params.enc_w) ||
                !all_finite(results[i].params.enc_b))
                throw std::runtime_error("non-finite parameters at round " +
                                         std::to_string(round) + ", client " +
                                         std::to_string(sampled[i]));
        }

        RoundRecord record;
        record.round = round;
        record.sampled = sampled;

        if (cfg.method == Method::LoA) {
            for (std::size_t i = 0; i < results.size(); ++i)
                state.locals[sampled[i]] = results[i].params;
        } else {
            std::vector<ModelParams> updated;
            updated.reserve(results.size());
            for (const ClientUpdateResult& r : results) updated.push_back(r.params);
            state.global = server_aggregate(updated);
        }

        double drift_sum = 0.0;
        for (std::size_t i = 0; i < results.size(); ++i) {
            ClientUpdateResult& r = results[i];
            fill_supervision(r, clients[sampled[i]]);
            if (!r.first_table.labels.empty())
                r.trace.pacc = pseudo_label_accuracy(r.first_table, clients[sampled[i]]);
            if (!r.final_table.labels.empty())
                r.trace.pacc_final =
                    pseudo_label_accuracy(r.final_table, clients[sampled[i]]);
            drift_sum += r.trace.drift;
            record.clients.push_back(std::move(r.trace));
        }
        record.mean_drift = drift_sum / static_cast<double>(results.size());

        const DomainAccuracy acc =
            cfg.method == Method::LoA
                ? evaluate_accuracy_per_client(state.locals, clients)
                : evaluate_accuracy(state.global, clients);
        record.domain_accuracy = acc.per_domain;
        record.average_accuracy = acc.average;

        state.history.push_back(std::move(record));

        if (cfg.checkpoint_every > 0 && round % cfg.checkpoint_every == 0 &&
            !cfg.checkpoint_dir.empty())
            save_checkpoint(cfg, state, round);
    }
}

}  // namespace

std::string method_name(Method m) {
    switch (m) {
        case Method::LoA: return "loa";
        case Method::FedLoA: return "fedloa";
        case Method::FedSCAl: return "fedscal";
    }
    return "unknown";
}

Method method_from_name(const std::string& name) {
    if (name == "loa") return Method::LoA;
    if (name == "fedloa") return Method::FedLoA;
    if (name == "fedscal") return Method::FedSCAl;
    throw std::invalid_argument("unknown method: " + name);
}

std::string strategy_name(PseudoLabelStrategy s) {
    return s == PseudoLabelStrategy::SHOT ? "shot" : "bmd";
}

PseudoLabelStrategy strategy_from_name(const std::string& name) {
    if (name == "shot") return PseudoLabelStrategy::SHOT;
    if (name == "bmd") return PseudoLabelStrategy::BMD;
    throw std::invalid_argument("unknown pseudo-label strategy: " + name);
}

ClientUpdateResult client_update(const ModelParams& broadcast, const UnlabeledView& data,
                                 const FederationConfig& cfg, int client_id, int round) {
    RngStream rng(cfg.master_seed, {kStreamClient, static_cast<std::uint64_t>(client_id),
                                    static_cast<std::uint64_t>(round)});

    ClientUpdateResult result;
    result.params = broadcast;
    result.trace.client_id = client_id;

    const bool client_arm = cfg.method == Method::FedSCAl && cfg.scal.lambda_local > 0.0;
    const bool server_arm = cfg.method == Method::FedSCAl && cfg.scal.lambda_global > 0.0;
    const bool scal_active = client_arm || server_arm;

    ThresholdState threshold = cfg.threshold;
    threshold.tau = threshold.tau_init;
    threshold.last_skewness = 0.0;
    if (scal_active && cfg.scal.adaptive_threshold)
        threshold = update_threshold(threshold, result.params, data);
    result.trace.tau = threshold.tau;
    result.trace.gamma = threshold.last_skewness;

    BMDState bmd = cfg.bmd;
    bmd.initialized = false;
    bmd.centroids.clear();

    const std::size_t n = data.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        PrototypeSet protos =
            cfg.strategy == PseudoLabelStrategy::SHOT
                ? compute_prototypes(result.params, data, cfg.prototype_refine)
                : bmd_prototypes(result.params, data, bmd);
        result.final_table = assign_pseudo_labels(protos, result.params, data);
        if (epoch == 0) result.first_table = result.final_table;

        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[rng.next_below(i)]);

        int batch_index = 0;
        for (std::size_t start = 0; start < n;
             start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
            const std::size_t end =
                std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> indices(order.begin() + start, order.begin() + end);
            std::vector<Vector> batch;
            batch.reserve(indices.size());
            for (std::size_t idx : indices) batch.push_back(data.features(idx));

            // draws happen for every method so reduced configs trace-align
            const AugmentedBatch aug = augment_batch(batch, cfg.augment, rng);

            LossSpec spec;
            if (cfg.strategy == PseudoLabelStrategy::SHOT) {
                spec = loa_loss_spec(result.final_table, indices, cfg.scal.beta);
            } else {
                std::vector<int> static_labels(indices.size());
                for (std::size_t s = 0; s < indices.size(); ++s)
                    static_labels[s] = result.final_table.labels[indices[s]];
                spec = bmd_loss_spec(result.params, batch, protos, bmd, static_labels);
            }

            ClientUpdateResult::BatchTargets targets;
            if (scal_active) {
                targets.indices = indices;
                targets.client_targets =
                    build_align_targets(result.params, aug.weak, threshold.tau);
                targets.server_targets =
                    build_align_targets(broadcast, aug.weak, threshold.tau);
                if (client_arm) {
                    spec.weight_client_align = cfg.scal.lambda_local;
                    spec.client_align = targets.client_targets;
                }
                if (server_arm) {
                    spec.weight_server_align = cfg.scal.lambda_global;
                    spec.server_align = targets.server_targets;
                }
                spec.strong_inputs = aug.strong;
            }

            const auto [value, grad] = loss_and_encoder_grad(result.params, batch, spec);
            if (!std::isfinite(value.total))
                throw std::runtime_error("non-finite loss at round " +
                                         std::to_string(round) + ", client " +
                                         std::to_string(client_id));
            result.params = apply_encoder_step(result.params, grad, cfg.learning_rate);

            BatchTrace trace;
            trace.epoch = epoch;
            trace.batch_index = batch_index;
            trace.loss_total = value.total;
            trace.loss_entropy = value.entropy;
            trace.loss_diversity = value.diversity;
            trace.loss_pseudo_ce = value.pseudo_ce;
            trace.loss_symmetric_ce = value.symmetric_ce;
            trace.loss_client_align = value.client_align;
            trace.loss_server_align = value.server_align;
            trace.client_gated = value.client_gated;
            trace.server_gated = value.server_gated;
            result.trace.batches.push_back(trace);
            result.batch_targets.push_back(std::move(targets));
        }
    }

    result.trace.drift = params_distance(result.params, broadcast);
    return result;
}

ModelParams server_aggregate(const std::vector<ModelParams>& params_list) {
    if (params_list.empty())
        throw std::invalid_argument("server_aggregate: empty list");
    const ModelParams& base = params_list.front();
    for (const ModelParams& p : params_list)
        if (!p.enc_w.same_shape(base.enc_w) || !p.cls_w.same_shape(base.cls_w) ||
            p.enc_b.size() != base.enc_b.size() || p.cls_b.size() != base.cls_b.size())
            throw std::invalid_argument("server_aggregate: shape mismatch");

    const double inv_q = 1.0 / static_cast<double>(params_list.size());
    ModelParams out = base;
    auto mean_into = [&](std::vector<double>& dst, auto block_of) {
        for (std::size_t i = 0; i < dst.size(); ++i) {
            double delta = 0.0;
            for (const ModelParams& p : params_list) delta += block_of(p)[i] - dst[i];
            // blocks identical across the list stay bitwise unchanged
            if (delta != 0.0) dst[i] += delta * inv_q;
        }
    };
    mean_into(out.enc_w.data,
              [](const ModelParams& p) -> const std::vector<double>& { return p.enc_w.data; });
    mean_into(out.enc_b,
              [](const ModelParams& p) -> const std::vector<double>& { return p.enc_b; });
    mean_into(out.cls_w.data,
              [](const ModelParams& p) -> const std::vector<double>& { return p.cls_w.data; });
    mean_into(out.cls_b,
              [](const ModelParams& p) -> const std::vector<double>& { return p.cls_b; });
    return out;
}

std::vector<int> sample_clients(int num_clients, int q, RngStream& rng) {
    if (q < 1 || q > num_clients)
        throw std::invalid_argument("sample_clients: invalid sample size");
    std::vector<int> ids(num_clients);
    for (int i = 0; i < num_clients; ++i) ids[i] = i;
    for (int i = 0; i < q; ++i) {
        const std::size_t j =
            static_cast<std::size_t>(i) +
            rng.next_below(static_cast<std::uint64_t>(num_clients - i));
        std::swap(ids[i], ids[j]);
    }
    ids.resize(q);
    std::sort(ids.begin(), ids.end());
    return ids;
}

FederationResult run_federation(const FederationConfig& cfg, const ModelParams& initial,
                                const std::vector<ClientDataset>& clients) {
    if (clients.empty())
        throw std::invalid_argument("run_federation: no clients");
    if (cfg.rounds < 0 || cfg.local_epochs < 0 || cfg.batch_size < 1)
        throw std::invalid_argument("run_federation: invalid configuration");
    if (cfg.participation_rate <= 0.0 || cfg.participation_rate > 1.0)
        throw std::invalid_argument("run_federation: participation rate out of range");

    LoopState state;
    state.global = initial;
    if (cfg.method == Method::LoA)
        state.locals.assign(clients.size(), initial);

    run_rounds(cfg, clients, state, 1);

    FederationResult result;
    result.final_params = std::move(state.global);
    result.history = std::move(state.history);
    result.local_params = std::move(state.locals);
    return result;
}

FederationResult resume_federation(const FederationConfig& cfg,
                                   const std::vector<ClientDataset>& clients) {
    int newest = -1;
    for (int r = cfg.rounds; r >= 1; --r) {
        if (std::filesystem::exists(checkpoint_manifest_path(cfg.checkpoint_dir, r))) {
            newest = r;
            break;
        }
    }
    if (newest < 0) throw std::runtime_error("resume_federation: no checkpoint found");

    LoopState state = load_checkpoint(cfg, newest);
    run_rounds(cfg, clients, state, newest + 1);

    FederationResult result;
    result.final_params = std::move(state.global);
    result.history = std::move(state.history);
    result.local_params = std::move(state.locals);
    return result;
}

std::string history_to_json(const std::vector<RoundRecord>& history) {
    nlohmann::json rounds = nlohmann::json::array();
    for (const RoundRecord& r : history) rounds.push_back(round_to_json(r));
    return rounds.dump();
}

std::vector<RoundRecord> history_from_json(const std::string& text) {
    nlohmann::json rounds = nlohmann::json::parse(text);
    std::vector<RoundRecord> history;
    for (const nlohmann::json& rj : rounds) history.push_back(round_from_json(rj));
    return history;
}

}  // namespace fedscal
