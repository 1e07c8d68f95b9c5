// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. Usage: acceptance [output_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fedseq/attacks.hpp"
#include "fedseq/config.hpp"
#include "fedseq/defense.hpp"
#include "fedseq/error.hpp"
#include "fedseq/eval.hpp"
#include "fedseq/fedsim.hpp"
#include "fedseq/harness.hpp"
#include "fedseq/parallel.hpp"
#include "support.hpp"

using namespace testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

Verdict gradient_correctness() {
    double worst = 0.0;
    std::string where;
    auto track = [&](const FdReport& r, const std::string& label) {
        if (r.worst > worst) {
            worst = r.worst;
            where = label + " " + r.where;
        }
    };
    for (Variant v : {Variant::causal, Variant::bidirectional}) {
        const std::string name(to_string(v));
        const ModelParams p = random_params(tiny_shape(v, 10, 8, 3), 42);
        const std::vector<ItemId> seq{4, 9, 2, 7};
        TrainOptions opts;
        opts.negatives = 2;
        opts.mask_prob = 0.5;
        for (std::uint64_t seed : {1u, 2u}) {
            track(finite_difference_check(p,
                                          [&](Graph& g, const BoundParams& bp) {
                                              Rng rng(seed);
                                              return build_bce_local_loss(g, p, bp, seq, opts, rng);
                                          }),
                  name + " local BCE");
        }
        track(finite_difference_check(p,
                                      [&](Graph& g, const BoundParams& bp) {
                                          return build_boost_loss(g, p, bp, std::vector<ItemId>{3, 8, 5}, 9,
                                                                  std::vector<ItemId>{1});
                                      }),
              name + " boost");
        track(finite_difference_check(p,
                                      [&](Graph& g, const BoundParams& bp) {
                                          const std::vector<std::size_t> anchor{9};
                                          const std::vector<std::size_t> hist{3, 8, 5};
                                          const std::vector<std::size_t> negs{1, 2, 6, 10};
                                          return g.contrastive(g.gather(bp.item, anchor),
                                                               g.mean_rows(g.gather(bp.item, hist)),
                                                               g.gather(bp.item, negs), kCosineEps);
                                      }),
              name + " contrastive");
    }
    return {worst <= 1e-4, "worst relative error " + fmt("%.2e", worst) + " (" + where + "), bound 1e-4"};
}

// ---------------------------------------------------------------- 2

Verdict federated_equivalence() {
    TrainingSetup s;
    s.shape = tiny_shape(Variant::causal, 10, 8, 3);
    s.federation.seed = 6;
    s.federation.rounds = 1;
    s.federation.server_lr = 0.7;
    s.federation.local.negatives = 0;
    s.federation.local.dropout = 0.0;
    s.eval.negatives = 5;
    const std::vector<std::vector<ItemId>> samples{{1, 2}, {3, 4}, {2, 9}, {7, 1}, {5, 5}, {10, 3}, {8, 6}};
    std::vector<ClientDataset> clients;
    for (std::size_t i = 0; i < samples.size(); ++i) clients.push_back({i + 1, samples[i], 6});
    const auto fed = run_training(clients, s);

    const ModelParams init = init_params(s.shape, s.federation.seed);
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
    return {worst <= 1e-6, "max elementwise difference " + fmt("%.2e", worst) + ", bound 1e-6"};
}

// ---------------------------------------------------------------- 3

using Points = std::vector<std::vector<double>>;

std::vector<double> grid_oracle(const Points& pts, const std::vector<double>& w) {
    auto best_in = [&](double x0, double x1, double y0, double y1, double step) {
        std::vector<double> best{x0, y0};
        double best_g = INFINITY;
        const auto nx = std::llround((x1 - x0) / step);
        const auto ny = std::llround((y1 - y0) / step);
        for (long long i = 0; i <= nx; ++i)
            for (long long j = 0; j <= ny; ++j) {
                const std::vector<double> v{x0 + static_cast<double>(i) * step, y0 + static_cast<double>(j) * step};
                const double g = gm_objective(pts, w, v);
                if (g < best_g) {
                    best_g = g;
                    best = v;
                }
            }
        return best;
    };
    // The objective is convex, so a 1e-2 pass over [-1, 6]^2 localises the 1e-3 pass.
    const auto c = best_in(-1.0, 6.0, -1.0, 6.0, 0.01);
    return best_in(c[0] - 0.02, c[0] + 0.02, c[1] - 0.02, c[1] + 0.02, 1e-3);
}

Verdict geometric_median_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    const DefenseConfig cfg;
    double worst = 0.0;
    bool monotone = true;
    Rng rng(2024);
    for (int set = 0; set < 5; ++set) {
        Points pts;
        std::vector<double> w;
        const std::size_t n = 3 + rng.below(6);
        for (std::size_t i = 0; i < n; ++i) {
            pts.push_back({rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0)});
            w.push_back(rng.uniform(0.5, 2.0));
        }
        const auto gm = geometric_median(pts, w, cfg);
        const auto oracle = grid_oracle(pts, w);
        worst = std::max({worst, std::abs(gm.point[0] - oracle[0]), std::abs(gm.point[1] - oracle[1])});
        for (std::size_t k = 1; k < gm.objective_trace.size(); ++k)
            monotone = monotone && gm.objective_trace[k] <= gm.objective_trace[k - 1] + 1e-12;
    }
    struct OneD {
        Points pts;
        std::vector<double> w;
        double median;
    };
    const std::vector<OneD> cases{{{{0}, {0}, {10}}, {1, 1, 1}, 0.0},
                                  {{{1}, {2}, {3}, {10}}, {1, 1, 3, 1}, 3.0},
                                  {{{-4}, {7}, {2}}, {1, 1, 1}, 2.0},
                                  {{{5}, {-1}}, {1, 4}, -1.0}};
    bool exact = true;
    for (const auto& c : cases) exact = exact && geometric_median(c.pts, c.w, cfg).point[0] == c.median;
    const double secs = seconds_since(t0);
    return {worst <= 2e-3 && monotone && exact && secs < 10.0,
            "max coordinate error " + fmt("%.2e", worst) + " (bound 2e-3), monotone " + (monotone ? "yes" : "no") +
                ", 1-D exact " + (exact ? "yes" : "no") + ", " + fmt("%.1f s", secs)};
}

// ---------------------------------------------------------------- 4

Verdict mixed_rfa_endpoints() {
    const ModelParams p = random_params(tiny_shape(Variant::causal, 20, 8, 5), 7);
    std::vector<GradientUpdate> grads;
    Rng rng(3);
    for (UserId u = 1; u <= 8; ++u) {
        std::vector<ItemId> seq;
        for (int i = 0; i < 4; ++i) seq.push_back(rng.below(20) + 1);
        grads.push_back(client_step({u, seq, 1}, p, TrainOptions{}, rng).grad);
    }
    const std::vector<double> w(grads.size(), 1.0);
    DefenseConfig cfg;
    cfg.rule = AggregationRule::mixed_rfa;
    cfg.lambda = 1.0;
    const bool mean_ok = mixed_rfa(grads, w, cfg) == weighted_mean(grads, w);
    cfg.lambda = 0.0;
    const GradientUpdate gm = geometric_median_update(grads, w, cfg);
    const bool gm_ok = mixed_rfa(grads, w, cfg) == gm;
    const auto a = flatten(weighted_mean(grads, w), p.shape);
    const auto b = flatten(gm, p.shape);
    double worst = 0.0;
    for (double lambda : {0.25, 0.5}) {
        cfg.lambda = lambda;
        const auto m = flatten(mixed_rfa(grads, w, cfg), p.shape);
        for (std::size_t j = 0; j < m.size(); ++j)
            worst = std::max(worst, std::abs(m[j] - (lambda * a[j] + (1 - lambda) * b[j])));
    }
    return {mean_ok && gm_ok && worst <= 1e-10, std::string("lambda=1 bitwise ") + (mean_ok ? "yes" : "no") +
                                                    ", lambda=0 bitwise " + (gm_ok ? "yes" : "no") +
                                                    ", affinity deviation " + fmt("%.2e", worst) + " (bound 1e-10)"};
}

// ---------------------------------------------------------------- 5

Verdict substitution_optimality() {
    const auto t0 = std::chrono::steady_clock::now();
    int cases = 0;
    int optimal = 0;
    for (Variant v : {Variant::causal, Variant::bidirectional})
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const ModelParams p = random_params(tiny_shape(v, 30, 8, 8), seed);
            Rng rng(seed);
            std::vector<ItemId> seq;
            for (int i = 0; i < 5; ++i) seq.push_back(rng.below(30) + 1);
            ItemId target;
            do target = rng.below(30) + 1;
            while (std::find(seq.begin(), seq.end(), target) != seq.end());
            const auto r = substitute_detailed(p, seq, target, 29, -1.0);
            double best = -INFINITY;
            for (ItemId c = 1; c <= 30; ++c) {
                if (c == target || c == r.original) continue;
                auto trial = seq;
                trial[r.position] = c;
                best = std::max(best, forward_scores(p, trial)[target]);
            }
            ++cases;
            optimal += r.target_score >= best ? 1 : 0;
        }
    const double secs = seconds_since(t0);
    return {optimal == cases && secs < 60.0,
            std::to_string(optimal) + "/" + std::to_string(cases) + " fixtures optimal, " + fmt("%.1f s", secs)};
}

// ---------------------------------------------------------------- 6-8

const char* kDeskConfig = R"(data.source = synthetic
data.synthetic_users = 200
data.synthetic_items = 50
data.synthetic_seq_len = 10
model.dim = 16
model.ffn_dim = 64
model.max_len = 10
fed.rounds = 30
fed.server_lr = 3
fed.local_negatives = 4
attack.targets = auto
)";

struct Desk {
    fs::path root;
    bool invariants_ok = true;

    MetricsReport run(const std::string& name, std::uint64_t seed, const std::string& extra) {
        ExperimentSpec spec = parse_config("seed = " + std::to_string(seed) + "\n" + kDeskConfig + extra);
        spec.output_dir = (root / (name + "_seed" + std::to_string(seed))).string();
        const RunOutcome out = run_experiment(spec);
        for (const auto& r : out.result.reports)
            if (r.metrics) {
                try {
                    r.metrics->check_invariants();
                } catch (const MetricError&) {
                    invariants_ok = false;
                }
            }
        return *out.result.reports.back().metrics;
    }
};

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

std::string list(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : "/") + fmt("%.3f", x);
    return s;
}

Verdict attack_trend(Desk& desk, std::vector<double>& darts_er) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> clean_er, clean_hr, ra_er, darts_hr;
    bool ok = true;
    for (std::uint64_t seed : kSeeds) {
        const auto clean = desk.run("clean", seed, "");
        const auto ra = desk.run("ra", seed, "attack.method = ra\nattack.malicious_fraction = 0.05\n");
        const auto darts = desk.run("darts", seed, "attack.method = darts\nattack.malicious_fraction = 0.05\n");
        clean_er.push_back(clean.er.at(10));
        clean_hr.push_back(clean.hr.at(10));
        ra_er.push_back(ra.er.at(10));
        darts_er.push_back(darts.er.at(10));
        darts_hr.push_back(darts.hr.at(10));
        ok = ok && clean.er.at(10) < 0.05 && ra.er.at(10) < 0.10 && darts.er.at(10) >= 0.5 &&
             darts.hr.at(10) >= 0.7 * clean.hr.at(10);
    }
    const double secs = seconds_since(t0);
    return {ok && secs < 600.0, "seeds 1/2/3: clean ER@10 " + list(clean_er) + " (<0.05), RA ER@10 " + list(ra_er) +
                                    " (<0.10), DARTS ER@10 " + list(darts_er) + " (>=0.5), HR@10 clean " +
                                    list(clean_hr) + " vs DARTS " + list(darts_hr) + " (<=30% drop), " +
                                    fmt("%.0f s", secs)};
}

Verdict ablation_ordering(Desk& desk, const std::vector<double>& darts_er) {
    if (darts_er.size() != kSeeds.size()) return {false, "needs the DARTS runs of criterion 6"};
    std::vector<double> s_er, c_er;
    int votes = 0;
    for (std::size_t i = 0; i < kSeeds.size(); ++i) {
        const auto s = desk.run("s_fsr", kSeeds[i], "attack.method = s_fsr\nattack.malicious_fraction = 0.05\n");
        const auto c = desk.run("c_fsr", kSeeds[i], "attack.method = c_fsr\nattack.malicious_fraction = 0.05\n");
        s_er.push_back(s.er.at(10));
        c_er.push_back(c.er.at(10));
        votes += darts_er[i] >= s.er.at(10) && s.er.at(10) >= c.er.at(10) ? 1 : 0;
    }
    return {votes >= 2, "ER@10 DARTS " + list(darts_er) + ", S-FSR " + list(s_er) + ", C-FSR " + list(c_er) + "; " +
                            std::to_string(votes) + "/3 seeds ordered (need 2)"};
}

Verdict defense_trend(Desk& desk, const std::vector<double>& darts_er) {
    if (darts_er.size() != kSeeds.size()) return {false, "needs the DARTS runs of criterion 6"};
    const auto t0 = std::chrono::steady_clock::now();
    const std::string rfa = "defense.rule = mixed_rfa\ndefense.lambda = 0.3\n";
    std::vector<double> rfa_er, hi_avg, hi_rfa;
    int votes = 0;
    for (std::size_t i = 0; i < kSeeds.size(); ++i) {
        const auto r = desk.run("darts_rfa", kSeeds[i], "attack.method = darts\nattack.malicious_fraction = 0.05\n" + rfa);
        rfa_er.push_back(r.er.at(10));
        votes += r.er.at(10) <= 0.5 * darts_er[i] ? 1 : 0;
        const std::string high = "attack.method = darts\nattack.malicious_fraction = 0.2\n";
        hi_avg.push_back(desk.run("darts_high", kSeeds[i], high).er.at(10));
        hi_rfa.push_back(desk.run("darts_high_rfa", kSeeds[i], high + rfa).er.at(10));
    }
    const double secs = seconds_since(t0);
    return {votes >= 2 && secs < 900.0,
            "m=0.05 ER@10 FedAvg " + list(darts_er) + " vs mixed-RFA " + list(rfa_er) + "; " + std::to_string(votes) +
                "/3 seeds with >=50% reduction (need 2); m=0.2 FedAvg " + list(hi_avg) + " vs mixed-RFA " +
                list(hi_rfa) + " (reduction may vanish), " + fmt("%.0f s", secs)};
}

// ---------------------------------------------------------------- 9

ModelParams ladder_model(std::size_t items) {
    ModelParams p = init_params(tiny_shape(Variant::causal, items, 2, 8), 1);
    for (double& x : p[kLn2Gamma].values()) x = 0.0;
    p[kLn2Beta](0, 0) = 1.0;
    p[kLn2Beta](0, 1) = 0.0;
    for (std::size_t i = 1; i <= items; ++i) {
        p.item_emb(i, 0) = static_cast<double>(i);
        p.item_emb(i, 1) = 0.3;
    }
    return p;
}

Verdict metric_exactness(const Desk& desk) {
    // Scores equal item ids for every user, so ranks are set by the histories.
    const ModelParams hr_model = ladder_model(20);
    const std::vector<ClientDataset> ranked{{1, {1, 2}, 20}, {2, {1, 2}, 18}, {3, {1, 2}, 10}};
    EvalConfig cfg;
    const auto hr = evaluate(hr_model, ranked, {}, cfg);
    const bool hr_ok = std::abs(hr.hr.at(10) - 2.0 / 3.0) < 1e-12 && std::abs(hr.ndcg.at(10) - 0.5) < 1e-12;
    const bool point_ok = hit_ndcg(1, 10).ndcg == 1.0 && hit_ndcg(3, 10).ndcg == 0.5 && hit_ndcg(11, 10).hr == 0.0;

    const ModelParams er_model = ladder_model(12);
    const std::vector<ClientDataset> users{
        {1, {7, 8, 9, 10, 11, 12}, 1}, {2, {9, 10, 11}, 1}, {3, {1, 2}, 3}, {4, {6, 1}, 3}, {5, {12, 3}, 1}};
    cfg.er_ks = {1, 5, 6, 10};
    const auto er = evaluate(er_model, users, std::vector<ItemId>{6}, cfg);
    const bool er_ok = er.er.at(1) == 0.25 && er.er.at(5) == 0.5 && er.er.at(6) == 0.75 && er.er.at(10) == 1.0 &&
                       er.eligible_users_er == 4;
    const bool ok = hr_ok && point_ok && er_ok && desk.invariants_ok;
    return {ok, "HR@10 " + fmt("%.4f", hr.hr.at(10)) + " (2/3), NDCG@10 " + fmt("%.4f", hr.ndcg.at(10)) +
                    " (0.5), ER@{1,5,6,10} " + fmt("%.2f", er.er.at(1)) + "/" + fmt("%.2f", er.er.at(5)) + "/" +
                    fmt("%.2f", er.er.at(6)) + "/" + fmt("%.2f", er.er.at(10)) +
                    " (0.25/0.50/0.75/1.00), ER monotone on every run report " + (desk.invariants_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------- 10

Verdict determinism(const fs::path& root) {
    std::vector<fs::path> dirs;
    for (std::size_t threads : {1u, 2u, 1u}) {
        set_worker_threads(threads);
        ExperimentSpec spec = parse_config(std::string("seed = 9\n") + kDeskConfig +
                                           "fed.clients_per_round = 80\neval.every = 5\n"
                                           "attack.method = darts\nattack.malicious_fraction = 0.05\n"
                                           "defense.rule = mixed_rfa\n");
        spec.federation.rounds = 10;
        spec.output_dir = (root / ("determinism_" + std::to_string(dirs.size()))).string();
        run_experiment(spec);
        dirs.emplace_back(spec.output_dir);
    }
    set_worker_threads(0);
    bool same = true;
    std::string detail;
    for (const char* name : {"rounds.jsonl", "summary.csv", "checkpoint.bin"}) {
        const std::string ref = slurp(dirs[0] / name);
        const bool eq = !ref.empty() && ref == slurp(dirs[1] / name) && ref == slurp(dirs[2] / name);
        same = same && eq;
        detail += std::string(detail.empty() ? "" : ", ") + name + (eq ? " identical" : " DIFFERS");
    }
    return {same, detail + " across 1, 2 and 1 worker threads"};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "fedseq_acceptance";
    fs::remove_all(root);
    fs::create_directories(root);

    int failures = 0;
    auto report = [&](int id, const char* title, const std::function<Verdict()>& check) {
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        failures += v.pass ? 0 : 1;
        std::printf("criterion %2d %-28s %s  %s\n", id, title, v.pass ? "PASS" : "FAIL", v.detail.c_str());
        std::fflush(stdout);
    };

    Desk desk{root / "desk"};
    std::vector<double> darts_er;
    report(1, "gradient correctness", gradient_correctness);
    report(2, "federated equivalence", federated_equivalence);
    report(3, "geometric median", geometric_median_correctness);
    report(4, "mixed-RFA endpoints", mixed_rfa_endpoints);
    report(5, "substitution optimality", substitution_optimality);
    report(6, "attack trend", [&] { return attack_trend(desk, darts_er); });
    report(7, "ablation ordering", [&] { return ablation_ordering(desk, darts_er); });
    report(8, "defense trend", [&] { return defense_trend(desk, darts_er); });
    report(9, "metric exactness", [&] { return metric_exactness(desk); });
    report(10, "determinism", [&] { return determinism(root); });
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
