#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "fedseq/error.hpp"
#include "fedseq/fedsim.hpp"
#include "fedseq/parallel.hpp"
#include "support.hpp"

using namespace testing;

namespace {

std::vector<UserId> population(std::size_t n) {
    std::vector<UserId> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i + 1;
    return out;
}

std::vector<ClientDataset> fixture_clients(std::uint64_t seed = 1) {
    return leave_one_out_split(generate_synthetic(200, 50, 10, seed), 10);
}

TrainingSetup fixture_setup(std::uint64_t seed = 1) {
    TrainingSetup s;
    s.shape.num_items = 50;
    s.shape.dim = 16;
    s.shape.ffn_dim = 64;
    s.shape.max_len = 10;
    s.federation.seed = seed;
    s.federation.server_lr = 3.0;
    s.federation.local.negatives = 4;
    s.eval.seed = seed;
    return s;
}

}  // namespace

TEST_CASE("client selection") {
    FederationConfig cfg;
    cfg.seed = 3;
    cfg.clients_per_round = 500;
    const auto pop = population(100);
    CHECK(select_clients(1, cfg, pop) == pop);

    std::vector<UserId> shuffled{9, 4, 7};
    CHECK(select_clients(1, cfg, shuffled) == std::vector<UserId>{4, 7, 9});

    cfg.clients_per_round = 10;
    const auto a = select_clients(5, cfg, pop);
    CHECK(a.size() == 10);
    CHECK(a == select_clients(5, cfg, pop));
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(a != select_clients(6, cfg, pop));

    std::map<UserId, int> counts;
    for (std::size_t r = 1; r <= 10000; ++r)
        for (UserId u : select_clients(r, cfg, pop)) ++counts[u];
    CHECK(counts.size() == 100);
    for (const auto& [u, c] : counts) {
        CAPTURE(u);
        CHECK(c >= 850);
        CHECK(c <= 1150);
    }
    CHECK_THROWS_AS(select_clients(1, cfg, std::vector<UserId>{}), std::invalid_argument);
}

TEST_CASE("client step is pure and local") {
    const ModelParams p = random_params(tiny_shape(Variant::causal, 30, 8, 6), 2);
    ClientDataset c;
    c.user = 4;
    c.train_seq = {3, 9, 14, 2};
    TrainOptions opts;
    opts.negatives = 2;
    Rng r1(10);
    Rng r2(10);
    const auto a = client_step(c, p, opts, r1);
    const auto b = client_step(c, p, opts, r2);
    CHECK(a.grad == b.grad);
    CHECK(a.loss == b.loss);
    // Three predicted positions, each with two negatives.
    CHECK(a.grad.item_emb.size() <= 4 + 6);
    for (ItemId i : c.train_seq) CHECK(a.grad.item_emb.count(i) == 1);
}

TEST_CASE("aggregate") {
    const ModelParams p = random_params(tiny_shape(Variant::causal), 1);
    ClientDataset c;
    c.train_seq = {1, 2, 3};
    Rng rng(1);
    const GradientUpdate g = client_step(c, p, TrainOptions{}, rng).grad;
    Rng rng2(2);
    c.train_seq = {5, 6, 7};
    const GradientUpdate h = client_step(c, p, TrainOptions{}, rng2).grad;

    DefenseConfig fedavg;
    DefenseConfig rfa;
    rfa.rule = AggregationRule::mixed_rfa;
    const std::vector<GradientUpdate> same{g, g, g};
    const std::vector<double> w3(3, 1.0);
    const auto flat_g = flatten(g, p.shape);
    for (const DefenseConfig& d : {fedavg, rfa}) {
        const auto out = flatten(aggregate(same, w3, d), p.shape);
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(flat_g[i]).epsilon(1e-12));
    }
    const std::vector<GradientUpdate> two{g, h};
    const auto first = aggregate(two, std::vector<double>{1, 0}, fedavg);
    CHECK(flatten(first, p.shape) == flat_g);
    CHECK_THROWS_AS(aggregate(two, std::vector<double>{1}, fedavg), AggregationError);
    CHECK_THROWS_AS(aggregate({}, {}, fedavg), AggregationError);
}

TEST_CASE("apply_update") {
    const ModelParams p = random_params(tiny_shape(Variant::bidirectional), 4);
    FederationConfig cfg;
    cfg.weight_decay = 0.0;
    CHECK(apply_update(p, zero_update(p), cfg) == p);

    // agg = params with lr 1 zeroes everything.
    GradientUpdate same = zero_update(p);
    for (std::size_t r = 1; r < p.item_emb.rows(); ++r)
        same.item_emb[r].assign(p.item_emb.row(r).begin(), p.item_emb.row(r).end());
    same.dense = p.dense;
    cfg.server_lr = 1.0;
    const ModelParams zero = apply_update(p, same, cfg);
    for (double x : zero.item_emb.values()) CHECK(x == 0.0);
    for (const Matrix& m : zero.dense)
        for (double x : m.values()) CHECK(x == 0.0);

    // Hand-computed step with decay.
    cfg.server_lr = 0.5;
    cfg.weight_decay = 0.1;
    GradientUpdate g = zero_update(p);
    g.item_emb[3] = std::vector<double>(p.shape.dim, 2.0);
    g.item_emb[0] = std::vector<double>(p.shape.dim, 9.0);
    g.dense[kFfnB2](0, 1) = -4.0;
    const ModelParams next = apply_update(p, g, cfg);
    CHECK(next.item_emb(3, 2) == doctest::Approx(0.95 * p.item_emb(3, 2) - 1.0));
    CHECK(next.item_emb(4, 0) == doctest::Approx(0.95 * p.item_emb(4, 0)));
    CHECK(next[kFfnB2](0, 1) == doctest::Approx(0.95 * p[kFfnB2](0, 1) + 2.0));
    for (double x : next.item_emb.row(0)) CHECK(x == 0.0);

    g.dense[kWq](0, 0) = std::numeric_limits<double>::infinity();
    try {
        apply_update(p, g, cfg);
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("attn_q") != std::string::npos);
    }
    GradientUpdate bad = zero_update(p);
    bad.item_emb[99] = std::vector<double>(p.shape.dim, 1.0);
    CHECK_THROWS_AS(apply_update(p, bad, cfg), AggregationError);
}

TEST_CASE("one FedAvg round over single-sample clients equals a centralized step") {
    TrainingSetup s;
    s.shape = tiny_shape(Variant::causal, 10, 8, 3);
    s.federation.seed = 6;
    s.federation.rounds = 1;
    s.federation.server_lr = 0.7;
    s.federation.local.negatives = 0;
    s.federation.local.dropout = 0.0;
    s.eval.negatives = 5;
    std::vector<ClientDataset> clients;
    const std::vector<std::vector<ItemId>> samples{{1, 2}, {3, 4}, {2, 9}, {7, 1}, {5, 5}, {10, 3}};
    for (std::size_t i = 0; i < samples.size(); ++i) {
        ClientDataset c;
        c.user = i + 1;
        c.train_seq = samples[i];
        c.test_item = 6;
        clients.push_back(c);
    }
    const auto fed = run_training(clients, s);

    const ModelParams init = init_params(s.shape, 6);
    const auto pooled = grad_params(init, [&](Graph& g, const BoundParams& bp) {
        Rng rng(0);
        Var total = build_bce_local_loss(g, init, bp, samples[0], s.federation.local, rng);
        for (std::size_t i = 1; i < samples.size(); ++i)
            total = g.add(total, build_bce_local_loss(g, init, bp, samples[i], s.federation.local, rng));
        return g.scale(total, 1.0 / static_cast<double>(samples.size()));
    });
    const ModelParams central = apply_update(init, pooled.grad, s.federation);
    double worst = 0.0;
    for (std::size_t i = 0; i < central.item_emb.size(); ++i)
        worst = std::max(worst, std::abs(central.item_emb.values()[i] - fed.params.item_emb.values()[i]));
    for (std::size_t t = 0; t < central.dense.size(); ++t)
        for (std::size_t i = 0; i < central.dense[t].size(); ++i)
            worst = std::max(worst, std::abs(central.dense[t].values()[i] - fed.params.dense[t].values()[i]));
    CHECK(worst <= 1e-6);
    CHECK(fed.reports.size() == 1);
    CHECK(fed.reports[0].train_loss_mean == doctest::Approx(pooled.loss));
}

TEST_CASE("training is deterministic across worker counts") {
    TrainingSetup s = fixture_setup(2);
    s.federation.rounds = 4;
    s.federation.clients_per_round = 60;
    s.federation.eval_every = 2;
    s.attack.method = AttackMethod::darts;
    s.attack.target_items = {50};
    s.attack.malicious_fraction = 0.05;
    s.attack.contrastive_negatives = 10;
    s.attack.seed = 2;
    const auto clients = fixture_clients(2);

    set_worker_threads(1);
    const auto one = run_training(clients, s);
    set_worker_threads(3);
    const auto three = run_training(clients, s);
    set_worker_threads(0);
    CHECK(one.params == three.params);
    CHECK(one.reports == three.reports);
    CHECK(one.malicious.users.size() == 10);
    CHECK(one.reports[1].metrics.has_value());
    CHECK_FALSE(one.reports[0].metrics.has_value());
    std::size_t attackers = 0;
    for (const auto& r : one.reports) attackers += r.num_malicious_selected;
    CHECK(attackers > 0);

    std::vector<std::size_t> seen;
    run_training(clients, s, [&](const RoundReport& r) { seen.push_back(r.round); });
    CHECK(seen == std::vector<std::size_t>{1, 2, 3, 4});
}

TEST_CASE("round reports survive a json round trip") {
    RoundReport r;
    r.round = 3;
    r.selected_clients = {1, 5, 8};
    r.num_malicious_selected = 1;
    r.train_loss_mean = 0.6931471805599453;
    CHECK(round_report_from_json(to_jsonl(r)) == r);
    MetricsReport m;
    m.hr[10] = 0.25;
    m.ndcg[10] = 0.125;
    m.er = {{5, 0.1}, {10, 1.0 / 3.0}};
    m.eligible_users_er = 7;
    m.evaluated_users = 9;
    r.metrics = m;
    const std::string line = to_jsonl(r);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(round_report_from_json(line) == r);
}

TEST_CASE("federated training on the synthetic fixture") {
    const auto clients = fixture_clients();
    TrainingSetup s = fixture_setup();
    s.eval_targets = {50};
    const auto result = run_training(clients, s);
    REQUIRE(result.reports.size() == 30);
    for (const auto& r : result.reports) CHECK(r.num_malicious_selected == 0);
    CHECK(result.malicious.users.empty());
    const auto& metrics = *result.reports.back().metrics;
    MESSAGE("clean HR@10 ", metrics.hr.at(10));
    CHECK(metrics.hr.at(10) >= 3.0 * 10.0 / 1001.0);
    CHECK(run_training(clients, s).params == result.params);
}

TEST_CASE("a lone client's loss falls in most rounds") {
    const auto all = fixture_clients();
    const std::vector<ClientDataset> one{all[0]};
    TrainingSetup s = fixture_setup();
    s.federation.server_lr = 0.5;
    s.federation.local.dropout = 0.0;
    TrainOptions probe = s.federation.local;
    auto loss_of = [&](const ModelParams& p) {
        Rng rng(123);
        return bce_local_loss(p, one[0].train_seq, probe, rng);
    };
    std::vector<double> losses{loss_of(init_params(s.shape, s.federation.seed))};
    // Replay round by round to observe every intermediate model.
    for (std::size_t r = 1; r <= 30; ++r) {
        TrainingSetup step = s;
        step.federation.rounds = r;
        losses.push_back(loss_of(run_training(one, step).params));
    }
    int falls = 0;
    for (std::size_t r = 1; r < losses.size(); ++r) falls += losses[r] < losses[r - 1] ? 1 : 0;
    MESSAGE("rounds with lower loss: ", falls);
    CHECK(falls >= 25);
}

TEST_CASE("federation config validation") {
    FederationConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.rounds = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = FederationConfig{};
    cfg.server_lr = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = FederationConfig{};
    cfg.local.dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
