#pragma once

#include <cstring>
#include <fstream>
#include <optional>
#include <string>

#include "continual/common.hpp"
#include "continual/fisher.hpp"
#include "continual/importance.hpp"
#include "continual/memory.hpp"
#include "continual/nn.hpp"
#include "continual/optim.hpp"
#include "continual/regularizers.hpp"

namespace continual {

/// Everything a training run mutates between task boundaries. Only two Fisher
/// vectors ever live here: the running estimate and the last boundary snapshot.
struct RunState {
    ModelParams params;
    AdamState adam;
    FisherDiag fisher_running;
    std::optional<FisherDiag> fisher_snapshot;
    ScoreState scores;
    PenaltyAnchor anchor;
    EpisodicMemory memory;
    int completed_tasks = 0;
};

// On-disk layout (little-endian): magic "CTNL", format version, then the state
// blocks in declaration order. Vectors and matrices are a 64-bit length (and
// column count for matrices) followed by raw doubles, matrices column-major.
namespace ckpt_detail {

constexpr std::uint32_t kMagic = 0x4C4E5443u;  // "CTNL"
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("truncated checkpoint: " + path);
    return v;
}

inline void put_vec(std::ostream& out, const Vec& v) {
    put<std::uint64_t>(out, static_cast<std::uint64_t>(v.size()));
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(sizeof(double) * v.size()));
}

inline Vec get_vec(std::istream& in, const std::string& path) {
    const auto n = get<std::uint64_t>(in, path);
    Vec v(static_cast<Index>(n));
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(sizeof(double) * n));
    if (!in) throw IoError("truncated checkpoint: " + path);
    return v;
}

inline void put_mat(std::ostream& out, const Mat& m) {
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline Mat get_mat(std::istream& in, const std::string& path) {
    const auto r = get<std::uint64_t>(in, path);
    const auto c = get<std::uint64_t>(in, path);
    Mat m(static_cast<Index>(r), static_cast<Index>(c));
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw IoError("truncated checkpoint: " + path);
    return m;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const RunState& state, const std::string& path) {
    namespace d = ckpt_detail;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    d::put(out, d::kMagic);
    d::put(out, d::kVersion);

    const ModelParams& p = state.params;
    d::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.num_layers()));
    for (Index l = 0; l < p.num_layers(); ++l) {
        d::put_mat(out, p.weight(l));
        d::put_vec(out, p.bias(l));
    }
    d::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.output_labels().size()));
    for (int y : p.output_labels()) d::put<std::int32_t>(out, y);

    d::put<std::int64_t>(out, state.adam.t);
    d::put_vec(out, state.adam.m);
    d::put_vec(out, state.adam.v);

    d::put<std::uint8_t>(out, static_cast<std::uint8_t>(state.fisher_running.provenance));
    d::put_vec(out, state.fisher_running.values);
    d::put<std::uint8_t>(out, state.fisher_snapshot ? 1 : 0);
    if (state.fisher_snapshot) {
        d::put<std::uint8_t>(out, static_cast<std::uint8_t>(state.fisher_snapshot->provenance));
        d::put_vec(out, state.fisher_snapshot->values);
    }

    const ScoreState& s = state.scores;
    d::put_vec(out, s.s_total);
    d::put_vec(out, s.s_current);
    d::put_vec(out, s.delta_l);
    d::put_vec(out, s.theta_at_flush);
    d::put<std::int32_t>(out, s.steps_since_flush);
    d::put<std::int32_t>(out, s.delta_t);
    d::put<double>(out, s.epsilon);
    d::put<std::uint8_t>(out, static_cast<std::uint8_t>(s.distance));
    d::put<std::int32_t>(out, s.finished_tasks);

    d::put_vec(out, state.anchor.theta_star);
    d::put_vec(out, state.anchor.weight);
    d::put<std::uint8_t>(out, static_cast<std::uint8_t>(state.anchor.method));
    d::put<double>(out, state.anchor.lambda);

    d::put<std::int64_t>(out, state.memory.budget());
    d::put<std::uint8_t>(out, static_cast<std::uint8_t>(state.memory.selection()));
    const std::vector<int> classes = state.memory.classes();
    d::put<std::uint32_t>(out, static_cast<std::uint32_t>(classes.size()));
    for (int y : classes) {
        d::put<std::int32_t>(out, y);
        d::put_mat(out, state.memory.exemplars(y));
    }

    d::put<std::int32_t>(out, state.completed_tasks);
    if (!out) throw IoError("write failed: " + path);
}

inline RunState load_checkpoint(const std::string& path) {
    namespace d = ckpt_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    if (d::get<std::uint32_t>(in, path) != d::kMagic)
        throw FormatError("not a checkpoint file: " + path);
    if (const auto v = d::get<std::uint32_t>(in, path); v != d::kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(v) + ": " + path);

    RunState state;
    const auto layers = d::get<std::uint32_t>(in, path);
    std::vector<Mat> ws;
    std::vector<Vec> bs;
    for (std::uint32_t l = 0; l < layers; ++l) {
        ws.push_back(d::get_mat(in, path));
        bs.push_back(d::get_vec(in, path));
    }
    const auto num_labels = d::get<std::uint32_t>(in, path);
    std::vector<int> labels;
    for (std::uint32_t i = 0; i < num_labels; ++i)
        labels.push_back(d::get<std::int32_t>(in, path));
    state.params = ModelParams::from_parts(std::move(ws), std::move(bs), std::move(labels));

    state.adam.t = d::get<std::int64_t>(in, path);
    state.adam.m = d::get_vec(in, path);
    state.adam.v = d::get_vec(in, path);

    state.fisher_running.provenance =
        static_cast<FisherProvenance>(d::get<std::uint8_t>(in, path));
    state.fisher_running.values = d::get_vec(in, path);
    if (d::get<std::uint8_t>(in, path)) {
        FisherDiag snap;
        snap.provenance = static_cast<FisherProvenance>(d::get<std::uint8_t>(in, path));
        snap.values = d::get_vec(in, path);
        state.fisher_snapshot = std::move(snap);
    }

    state.scores.s_total = d::get_vec(in, path);
    state.scores.s_current = d::get_vec(in, path);
    state.scores.delta_l = d::get_vec(in, path);
    state.scores.theta_at_flush = d::get_vec(in, path);
    state.scores.steps_since_flush = d::get<std::int32_t>(in, path);
    state.scores.delta_t = d::get<std::int32_t>(in, path);
    state.scores.epsilon = d::get<double>(in, path);
    state.scores.distance = static_cast<StepDistance>(d::get<std::uint8_t>(in, path));
    state.scores.finished_tasks = d::get<std::int32_t>(in, path);

    state.anchor.theta_star = d::get_vec(in, path);
    state.anchor.weight = d::get_vec(in, path);
    state.anchor.method = static_cast<Method>(d::get<std::uint8_t>(in, path));
    state.anchor.lambda = d::get<double>(in, path);

    const auto budget = d::get<std::int64_t>(in, path);
    const auto selection = static_cast<SamplerKind>(d::get<std::uint8_t>(in, path));
    state.memory = EpisodicMemory(static_cast<Index>(budget), selection);
    const auto num_classes = d::get<std::uint32_t>(in, path);
    for (std::uint32_t i = 0; i < num_classes; ++i) {
        const int y = d::get<std::int32_t>(in, path);
        state.memory.add_class(y, d::get_mat(in, path));
    }

    state.completed_tasks = d::get<std::int32_t>(in, path);
    return state;
}

}  // namespace continual
