#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "fedscal/experiment.hpp"
#include "fedscal/federation.hpp"
#include "oracles.hpp"

using namespace fedscal;

namespace {

struct Fixture {
    std::vector<ClientDataset> clients;
    ModelParams initial;
};

Fixture make_fixture(std::uint64_t seed, int target_domains = 2,
                     int clients_per_domain = 2, int samples_per_class = 12) {
    SyntheticGeometry geo;
    geo.dim = 6;
    geo.num_classes = 3;
    geo.samples_per_class = samples_per_class;
    geo.num_target_domains = target_domains;
    geo.within_class_std = 0.6;
    geo.shift_strength = 0.3;
    geo.translation_scale = 0.6;

    const auto domains = make_synthetic_domains(geo, seed);
    const std::vector<DomainSpec> targets(domains.begin() + 1, domains.end());
    RngStream split_rng(seed, {1});
    Fixture fx;
    Federation fed = build_federation(domains.front(), targets, clients_per_domain,
                                      split_rng);
    fx.clients = std::move(fed.clients);

    RngStream init_rng(seed, {2});
    const ModelParams init = make_initial_params(geo.dim, 8, geo.num_classes, init_rng);
    PretrainConfig pre;
    pre.epochs = 12;
    pre.learning_rate = 0.15;
    pre.batch_size = 12;
    RngStream pre_rng(seed, {3});
    fx.initial = pretrain_source(init, fed.source, pre, pre_rng).params;
    return fx;
}

FederationConfig tiny_config(Method method, std::uint64_t seed) {
    FederationConfig cfg;
    cfg.method = method;
    cfg.master_seed = seed;
    cfg.rounds = 3;
    cfg.local_epochs = 2;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.05;
    cfg.participation_rate = 0.5;
    cfg.augment.weak_noise_std = 0.1;
    cfg.augment.strong_noise_std = 0.4;
    cfg.augment.strong_mask_prob = 0.2;
    return cfg;
}

}  // namespace

TEST_CASE("server_aggregate: identical inputs pass through exactly") {
    RngStream rng(301, 0);
    const ModelParams p = oracle::random_params(3, 4, 2, rng);
    const ModelParams agg = server_aggregate({p, p, p});
    CHECK(params_hash(agg) == params_hash(p));
}

TEST_CASE("server_aggregate: scalar blocks average exactly") {
    ModelParams a, b;
    for (ModelParams* p : {&a, &b}) {
        p->enc_w = Matrix(1, 1);
        p->enc_b = Vector(1, 0.0);
        p->cls_w = Matrix(1, 1);
        p->cls_b = Vector(1, 0.0);
    }
    a.enc_w(0, 0) = 1.0;
    b.enc_w(0, 0) = 3.0;
    const ModelParams agg = server_aggregate({a, b});
    CHECK(agg.enc_w(0, 0) == 2.0);
}

TEST_CASE("server_aggregate: matches the element-wise mean oracle") {
    RngStream rng(311, 0);
    std::vector<ModelParams> list;
    for (int i = 0; i < 5; ++i) list.push_back(oracle::random_params(3, 4, 2, rng));
    const ModelParams agg = server_aggregate(list);
    for (std::size_t i = 0; i < agg.enc_w.data.size(); ++i) {
        double mean = 0.0;
        for (const ModelParams& p : list) mean += p.enc_w.data[i];
        mean /= 5.0;
        CHECK(agg.enc_w.data[i] == doctest::Approx(mean).epsilon(1e-15));
    }

    std::vector<ModelParams> bad = list;
    bad[2].enc_b.push_back(0.0);
    CHECK_THROWS_AS(server_aggregate(bad), std::invalid_argument);
}

TEST_CASE("server_aggregate: a shared frozen head survives byte-for-byte") {
    RngStream rng(313, 0);
    ModelParams base = oracle::random_params(3, 4, 2, rng);
    std::vector<ModelParams> list;
    for (int i = 0; i < 7; ++i) {
        ModelParams p = base;  // same head
        for (double& v : p.enc_w.data) v += rng.next_gaussian();
        list.push_back(std::move(p));
    }
    const ModelParams agg = server_aggregate(list);
    CHECK(classifier_hash(agg) == classifier_hash(base));
}

TEST_CASE("sample_clients: uniform without replacement, 3-sigma frequencies") {
    const int k = 15, q = 5, rounds = 1000;
    std::vector<int> hits(k, 0);
    for (int r = 1; r <= rounds; ++r) {
        RngStream rng(77, {0x5a, static_cast<std::uint64_t>(r)});
        const std::vector<int> sampled = sample_clients(k, q, rng);
        CHECK(sampled.size() == q);
        for (std::size_t i = 1; i < sampled.size(); ++i)
            CHECK(sampled[i] > sampled[i - 1]);  // ascending, distinct
        for (int id : sampled) ++hits[id];
    }
    const double expectation = rounds * static_cast<double>(q) / k;
    const double sigma = std::sqrt(rounds * (q / 15.0) * (1.0 - q / 15.0));
    for (int id = 0; id < k; ++id)
        CHECK(std::abs(hits[id] - expectation) < 3.0 * sigma);
}

TEST_CASE("run_federation: zero rounds returns the initial model untouched") {
    const Fixture fx = make_fixture(401);
    FederationConfig cfg = tiny_config(Method::FedLoA, 401);
    cfg.rounds = 0;
    const FederationResult result = run_federation(cfg, fx.initial, fx.clients);
    CHECK(result.history.empty());
    CHECK(params_hash(result.final_params) == params_hash(fx.initial));
}

TEST_CASE("run_federation: participation rate 0.3 with 15 clients samples 5") {
    const Fixture fx = make_fixture(403, 3, 5, 6);
    REQUIRE(fx.clients.size() == 15);
    FederationConfig cfg = tiny_config(Method::FedLoA, 403);
    cfg.rounds = 1;
    cfg.local_epochs = 1;
    cfg.participation_rate = 0.3;
    const FederationResult result = run_federation(cfg, fx.initial, fx.clients);
    CHECK(result.history[0].sampled.size() == 5);
}

TEST_CASE("run_federation: same seed gives a bitwise identical run") {
    const Fixture fx = make_fixture(409);
    const FederationConfig cfg = tiny_config(Method::FedSCAl, 409);
    const FederationResult a = run_federation(cfg, fx.initial, fx.clients);
    const FederationResult b = run_federation(cfg, fx.initial, fx.clients);
    CHECK(params_hash(a.final_params) == params_hash(b.final_params));
    CHECK(history_to_json(a.history) == history_to_json(b.history));
}

TEST_CASE("run_federation: OpenMP client loop equals the serial reference") {
    const Fixture fx = make_fixture(419);
    FederationConfig serial_cfg = tiny_config(Method::FedSCAl, 419);
    serial_cfg.execution = ExecutionMode::Serial;
    FederationConfig parallel_cfg = serial_cfg;
    parallel_cfg.execution = ExecutionMode::Parallel;

    const FederationResult s = run_federation(serial_cfg, fx.initial, fx.clients);
    const FederationResult p = run_federation(parallel_cfg, fx.initial, fx.clients);
    CHECK(params_hash(s.final_params) == params_hash(p.final_params));
    CHECK(history_to_json(s.history) == history_to_json(p.history));
}

TEST_CASE("reduction: FedSCAl with zero lambdas is exactly FedLoA") {
    const Fixture fx = make_fixture(421);
    FederationConfig scal_cfg = tiny_config(Method::FedSCAl, 421);
    scal_cfg.scal.lambda_local = 0.0;
    scal_cfg.scal.lambda_global = 0.0;
    const FederationConfig loa_cfg = tiny_config(Method::FedLoA, 421);

    const FederationResult a = run_federation(scal_cfg, fx.initial, fx.clients);
    const FederationResult b = run_federation(loa_cfg, fx.initial, fx.clients);
    CHECK(params_hash(a.final_params) == params_hash(b.final_params));
    CHECK(history_to_json(a.history) == history_to_json(b.history));
}

TEST_CASE("lattice: FedLoA with a single always-on client equals LoA") {
    const Fixture fx = make_fixture(431, 1, 1);
    REQUIRE(fx.clients.size() == 1);
    FederationConfig fed_cfg = tiny_config(Method::FedLoA, 431);
    fed_cfg.participation_rate = 1.0;
    FederationConfig loa_cfg = tiny_config(Method::LoA, 431);
    loa_cfg.participation_rate = 1.0;

    const FederationResult fed = run_federation(fed_cfg, fx.initial, fx.clients);
    const FederationResult loa = run_federation(loa_cfg, fx.initial, fx.clients);
    CHECK(history_to_json(fed.history) == history_to_json(loa.history));
    CHECK(params_hash(fed.final_params) == params_hash(loa.local_params[0]));
}

TEST_CASE("client_update: zero epochs and zero learning rate are no-ops") {
    const Fixture fx = make_fixture(433);
    FederationConfig cfg = tiny_config(Method::FedSCAl, 433);

    cfg.local_epochs = 0;
    const ClientUpdateResult none =
        client_update(fx.initial, UnlabeledView(fx.clients[0]), cfg, 0, 1);
    CHECK(params_hash(none.params) == params_hash(fx.initial));

    cfg.local_epochs = 2;
    cfg.learning_rate = 0.0;
    const ClientUpdateResult frozen =
        client_update(fx.initial, UnlabeledView(fx.clients[0]), cfg, 0, 1);
    CHECK(params_hash(frozen.params) == params_hash(fx.initial));
}

TEST_CASE("client_update: one epoch, one batch equals a hand-stepped update") {
    const Fixture fx = make_fixture(439);
    const ClientDataset& ds = fx.clients[0];
    FederationConfig cfg = tiny_config(Method::FedLoA, 439);
    cfg.local_epochs = 1;
    cfg.batch_size = static_cast<int>(ds.samples.size());  // single batch
    cfg.augment = AugmentationConfig{};  // identity augmentations

    const ClientUpdateResult got =
        client_update(fx.initial, UnlabeledView(ds), cfg, 0, 1);

    // reference step in natural sample order (order only perturbs rounding)
    const UnlabeledView view(ds);
    const PrototypeSet protos = compute_prototypes(fx.initial, view, cfg.prototype_refine);
    const PseudoLabelTable table = assign_pseudo_labels(protos, fx.initial, view);
    std::vector<std::size_t> idx(ds.samples.size());
    std::vector<Vector> batch;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        idx[i] = i;
        batch.push_back(ds.samples[i].features);
    }
    const LossSpec spec = loa_loss_spec(table, idx, cfg.scal.beta);
    const auto [value, grad] = loss_and_encoder_grad(fx.initial, batch, spec);
    const ModelParams expected = apply_encoder_step(fx.initial, grad, cfg.learning_rate);

    for (std::size_t i = 0; i < expected.enc_w.data.size(); ++i)
        CHECK(got.params.enc_w.data[i] ==
              doctest::Approx(expected.enc_w.data[i]).epsilon(1e-10));
    for (std::size_t i = 0; i < expected.enc_b.size(); ++i)
        CHECK(got.params.enc_b[i] == doctest::Approx(expected.enc_b[i]).epsilon(1e-10));
}

TEST_CASE("frozen head: classifier block never moves across a full run") {
    const Fixture fx = make_fixture(443);
    const std::uint64_t head = classifier_hash(fx.initial);
    for (Method m : {Method::LoA, Method::FedLoA, Method::FedSCAl}) {
        const FederationConfig cfg = tiny_config(m, 443);
        const FederationResult result = run_federation(cfg, fx.initial, fx.clients);
        CHECK(classifier_hash(result.final_params) == head);
        for (const ModelParams& p : result.local_params)
            CHECK(classifier_hash(p) == head);
    }
}

TEST_CASE("labels only touch metrics: permuting them leaves training unchanged") {
    const Fixture fx = make_fixture(449);
    const FederationConfig cfg = tiny_config(Method::FedSCAl, 449);

    std::vector<ClientDataset> permuted = fx.clients;
    for (ClientDataset& ds : permuted)
        for (LabeledSample& s : ds.samples)
            s.true_label = (s.true_label + 1) % 3;

    const FederationResult a = run_federation(cfg, fx.initial, fx.clients);
    const FederationResult b = run_federation(cfg, fx.initial, permuted);
    CHECK(params_hash(a.final_params) == params_hash(b.final_params));

    // while the label-dependent metric moved
    CHECK(a.history.back().clients[0].pacc != b.history.back().clients[0].pacc);
}

TEST_CASE("checkpointing: resumed run equals the uninterrupted one") {
    const Fixture fx = make_fixture(457);
    const std::string dir =
        (std::filesystem::temp_directory_path() / "fedscal_ckpt_test").string();
    std::filesystem::remove_all(dir);

    FederationConfig full_cfg = tiny_config(Method::FedSCAl, 457);
    full_cfg.rounds = 4;
    const FederationResult full = run_federation(full_cfg, fx.initial, fx.clients);

    FederationConfig half_cfg = full_cfg;
    half_cfg.rounds = 2;
    half_cfg.checkpoint_every = 2;
    half_cfg.checkpoint_dir = dir;
    run_federation(half_cfg, fx.initial, fx.clients);

    FederationConfig resume_cfg = full_cfg;
    resume_cfg.checkpoint_dir = dir;
    const FederationResult resumed = resume_federation(resume_cfg, fx.clients);

    CHECK(params_hash(resumed.final_params) == params_hash(full.final_params));
    CHECK(history_to_json(resumed.history) == history_to_json(full.history));
    std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite parameters abort with round and client context") {
    Fixture fx = make_fixture(461);
    fx.initial.enc_w(0, 0) = std::numeric_limits<double>::quiet_NaN();
    const FederationConfig cfg = tiny_config(Method::FedLoA, 461);
    CHECK_THROWS_WITH_AS(run_federation(cfg, fx.initial, fx.clients),
                         doctest::Contains("round 1"), std::runtime_error);
}

TEST_CASE("scal runs record batch-level supervision counts with inclusion") {
    const Fixture fx = make_fixture(463);
    const FederationConfig cfg = tiny_config(Method::FedSCAl, 463);
    const FederationResult result = run_federation(cfg, fx.initial, fx.clients);
    int recorded = 0;
    for (const RoundRecord& r : result.history)
        for (const ClientRoundTrace& c : r.clients)
            for (const BatchTrace& b : c.batches) {
                const SupervisionCounts& s = b.supervision;
                CHECK(s.both_wrong <= std::min(s.local_wrong, s.global_wrong));
                recorded += s.local_gated + s.global_gated;
            }
    CHECK(recorded > 0);
}
