#include <catch2/catch_amalgamated.hpp>

#include <continual/regularizers.hpp>

#include <cmath>

using namespace continual;

namespace {

ScoreState scores_with_total(const Vec& total) {
    ScoreState s = make_score_state(Vec::Zero(total.size()), 1, 1e-3);
    s.s_total = total;
    return s;
}

}  // namespace

TEST_CASE("method names round-trip") {
    for (Method m : {Method::vanilla, Method::ewcpp, Method::pi, Method::rwalk})
        REQUIRE(method_from_name(method_name(m)) == m);
    REQUIRE_THROWS_AS(method_from_name("sgd"), std::invalid_argument);
}

TEST_CASE("vanilla anchor never penalizes") {
    const Vec theta = Vec::Constant(4, 1.5);
    const PenaltyAnchor a =
        make_anchor(Method::vanilla, theta, FisherDiag::zeros(4), scores_with_total(Vec::Zero(4)),
                    123.0);
    REQUIRE(penalty(a, Vec::Constant(4, -100.0)) == 0.0);
    REQUIRE(penalty_grad(a, Vec::Constant(4, -100.0)) == Vec::Zero(4));
}

TEST_CASE("ewcpp anchor keeps the raw fisher snapshot") {
    Vec fvals(3);
    fvals << 0.5, 0.0, 7.0;
    const FisherDiag snap{fvals, FisherProvenance::snapshot};
    const Vec theta = Vec::Zero(3);
    const PenaltyAnchor a =
        make_anchor(Method::ewcpp, theta, snap, scores_with_total(Vec::Zero(3)), 10.0);
    REQUIRE(a.weight == fvals);
    REQUIRE(a.theta_star == theta);
}

TEST_CASE("rwalk adds the two individually normalized parts") {
    Vec fvals(2), svals(2);
    fvals << 0.0, 4.0;
    svals << 2.0, 0.0;
    const PenaltyAnchor a = make_anchor(Method::rwalk, Vec::Zero(2),
                                        {fvals, FisherProvenance::snapshot},
                                        scores_with_total(svals), 1.0);
    REQUIRE(a.weight(0) == 1.0);
    REQUIRE(a.weight(1) == 1.0);
}

TEST_CASE("pi anchor normalizes scores by default, raw on request") {
    Vec svals(3);
    svals << 0.0, 5.0, 10.0;
    const ScoreState s = scores_with_total(svals);
    const PenaltyAnchor norm = make_anchor(Method::pi, Vec::Zero(3), FisherDiag::zeros(3), s, 1.0);
    REQUIRE(norm.weight(2) == 1.0);
    REQUIRE(norm.weight(1) == 0.5);
    const PenaltyAnchor raw =
        make_anchor(Method::pi, Vec::Zero(3), FisherDiag::zeros(3), s, 1.0, /*normalize_pi=*/false);
    REQUIRE(raw.weight == svals);
}

TEST_CASE("negative lambda is rejected") {
    REQUIRE_THROWS_AS(make_anchor(Method::ewcpp, Vec::Zero(2), FisherDiag::zeros(2),
                                  scores_with_total(Vec::Zero(2)), -1.0),
                      std::invalid_argument);
}

TEST_CASE("penalty arithmetic") {
    PenaltyAnchor a;
    a.method = Method::ewcpp;
    a.lambda = 1.0;
    a.theta_star = Vec::Zero(1);
    a.weight = Vec::Constant(1, 1.0);
    REQUIRE(penalty(a, Vec::Zero(1)) == 0.0);
    REQUIRE_THAT(penalty(a, Vec::Constant(1, 2.0)), Catch::Matchers::WithinRel(4.0, 1e-15));

    a.lambda = 0.5;
    a.weight = Vec::Constant(1, 3.0);
    const Vec g = penalty_grad(a, Vec::Constant(1, 1.0));
    REQUIRE_THAT(g(0), Catch::Matchers::WithinRel(3.0, 1e-15));

    REQUIRE_THROWS_AS(penalty(a, Vec::Zero(2)), ShapeError);
    REQUIRE_THROWS_AS(penalty_grad(a, Vec::Zero(2)), ShapeError);
}

TEST_CASE("penalty gradient matches central finite differences") {
    Rng rng(11);
    const Index n = 12;
    PenaltyAnchor a;
    a.method = Method::rwalk;
    a.lambda = 2.5;
    a.theta_star = Vec::Zero(n);
    a.weight = Vec::Zero(n);
    Vec theta(n);
    for (Index i = 0; i < n; ++i) {
        a.theta_star(i) = rng.normal();
        a.weight(i) = rng.uniform();
        theta(i) = rng.normal();
    }
    const Vec g = penalty_grad(a, theta);
    const double h = 1e-6;
    for (Index i = 0; i < n; ++i) {
        Vec tp = theta, tm = theta;
        tp(i) += h;
        tm(i) -= h;
        const double fd = (penalty(a, tp) - penalty(a, tm)) / (2.0 * h);
        REQUIRE_THAT(g(i), Catch::Matchers::WithinRel(fd, 1e-6));
    }
}

TEST_CASE("add_penalty_grad accumulates the same vector") {
    Rng rng(12);
    PenaltyAnchor a;
    a.method = Method::ewcpp;
    a.lambda = 3.0;
    a.theta_star = Vec::Zero(5);
    a.weight = Vec::Constant(5, 0.4);
    Vec theta(5), base(5);
    for (Index i = 0; i < 5; ++i) {
        theta(i) = rng.normal();
        base(i) = rng.normal();
    }
    Vec acc = base;
    add_penalty_grad(a, theta, acc);
    REQUIRE((acc - base - penalty_grad(a, theta)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("gradient descent on the penalty alone converges to theta_star") {
    Rng rng(13);
    PenaltyAnchor a;
    a.method = Method::pi;
    a.lambda = 1.0;
    a.theta_star = Vec::Zero(6);
    a.weight = Vec::Zero(6);
    Vec theta(6);
    for (Index i = 0; i < 6; ++i) {
        a.theta_star(i) = rng.normal();
        a.weight(i) = 0.1 + rng.uniform();  // strictly positive
        theta(i) = rng.normal() * 3.0;
    }
    for (int it = 0; it < 2000; ++it) theta -= 0.1 * penalty_grad(a, theta);
    REQUIRE((theta - a.theta_star).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("penalty is nonnegative and vanishes only on weighted agreement") {
    PenaltyAnchor a;
    a.method = Method::ewcpp;
    a.lambda = 1.0;
    a.theta_star = Vec::Zero(3);
    a.weight = Vec::Zero(3);
    a.weight << 1.0, 0.0, 2.0;
    Vec theta(3);
    theta << 0.0, 42.0, 0.0;  // differs only on the zero-weight coordinate
    REQUIRE(penalty(a, theta) == 0.0);
    theta(2) = 1e-3;
    REQUIRE(penalty(a, theta) > 0.0);
}

TEST_CASE("ewcpp penalty equals 2 lambda times the quadratic KL") {
    Rng rng(14);
    const Index n = 40;
    Vec fvals(n), theta(n), star(n);
    for (Index i = 0; i < n; ++i) {
        fvals(i) = rng.uniform() * 3.0;
        theta(i) = rng.normal();
        star(i) = rng.normal();
    }
    const FisherDiag snap{fvals, FisherProvenance::snapshot};
    const double lambda = 7.5;
    const PenaltyAnchor a =
        make_anchor(Method::ewcpp, star, snap, scores_with_total(Vec::Zero(n)), lambda);
    const double via_penalty = penalty(a, theta);
    const double via_kl = 2.0 * lambda * kl_quadratic(snap, star, theta);
    REQUIRE_THAT(via_penalty, Catch::Matchers::WithinAbs(via_kl, 1e-12));
}

TEST_CASE("rwalk with zero scores ranks coordinates like ewcpp") {
    Rng rng(15);
    const Index n = 30;
    Vec fvals(n);
    for (Index i = 0; i < n; ++i) fvals(i) = rng.uniform() * 5.0;
    const FisherDiag snap{fvals, FisherProvenance::snapshot};
    const ScoreState zero_scores = scores_with_total(Vec::Zero(n));
    const PenaltyAnchor ewc =
        make_anchor(Method::ewcpp, Vec::Zero(n), snap, zero_scores, 1.0);
    const PenaltyAnchor rwalk =
        make_anchor(Method::rwalk, Vec::Zero(n), snap, zero_scores, 1.0);
    Index am_ewc, am_rwalk;
    ewc.weight.maxCoeff(&am_ewc);
    rwalk.weight.maxCoeff(&am_rwalk);
    REQUIRE(am_ewc == am_rwalk);
}

TEST_CASE("anchor growth leaves new coordinates unpinned") {
    Rng rng(16);
    ModelParams p = ModelParams::make_mlp(3, {4}, {0, 1}, rng);
    const Vec theta = p.to_flat();
    FisherDiag snap{Vec::Constant(theta.size(), 0.5), FisherProvenance::snapshot};
    PenaltyAnchor a = make_anchor(Method::ewcpp, theta,
                                  snap, scores_with_total(Vec::Zero(theta.size())), 2.0);
    const auto before = p.shapes();
    p.grow_output({2}, rng);
    a.grow(before, p.shapes());
    REQUIRE(a.weight.size() == p.flat_size());
    // a model sitting at theta_star on old coordinates pays nothing, wherever
    // the new row went
    Vec probe = grow_flat(theta, before, p.shapes(), 0.0);
    // perturb only new coordinates (they hold fill 0 in theta_star and weight)
    ModelParams probe_model = p;
    probe_model.from_flat(probe);
    probe_model.weight(1).row(2).setConstant(99.0);
    REQUIRE(penalty(a, probe_model.to_flat()) == 0.0);
}
