#pragma once

#include <string>
#include <vector>

#include "continual/common.hpp"

namespace continual {

enum class HeadMode { single, multi };

inline const char* head_name(HeadMode h) {
    return h == HeadMode::single ? "single" : "multi";
}

/// Lower-triangular record of test accuracies: entry (k, j), defined for j <= k,
/// is the accuracy on task j's test set after training through task k. Indices
/// are 1-based to keep the metric formulas readable.
class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(HeadMode head) : head_(head) {}

    HeadMode head_mode() const { return head_; }
    int rows() const { return static_cast<int>(rows_.size()); }

    /// Rows must arrive in order; row k carries exactly k entries.
    void append_row(const std::vector<double>& accuracies) {
        require(static_cast<int>(accuracies.size()) == rows() + 1,
                "append_row: row k must have k entries");
        for (double a : accuracies)
            require(a >= 0.0 && a <= 1.0, "append_row: accuracy outside [0,1]");
        rows_.push_back(accuracies);
    }

    double at(int k, int j) const {
        if (k < 1 || k > rows())
            throw IncompleteMatrixError("accuracy matrix has no row " + std::to_string(k));
        if (j < 1 || j > k)
            throw IncompleteMatrixError("entry (" + std::to_string(k) + "," + std::to_string(j) +
                                        ") is outside the lower triangle");
        return rows_[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(j - 1)];
    }

    const std::vector<double>& row(int k) const {
        if (k < 1 || k > rows())
            throw IncompleteMatrixError("accuracy matrix has no row " + std::to_string(k));
        return rows_[static_cast<std::size_t>(k - 1)];
    }

    bool operator==(const AccuracyMatrix& other) const {
        return head_ == other.head_ && rows_ == other.rows_;
    }

private:
    std::vector<std::vector<double>> rows_;
    HeadMode head_ = HeadMode::single;
};

/// a_star[k] (1-based): accuracy on task k's test set of a reference model
/// trained jointly on every dataset through task k.
struct ReferenceAccuracies {
    std::vector<double> a_star;

    int size() const { return static_cast<int>(a_star.size()); }

    double at(int k) const {
        if (k < 1 || k > size())
            throw MissingDataError("no reference accuracy for task " + std::to_string(k));
        return a_star[static_cast<std::size_t>(k - 1)];
    }
};

/// A_k: mean accuracy over all tasks seen so far, evaluated after task k.
inline double average_accuracy(const AccuracyMatrix& a, int k) {
    const std::vector<double>& row = a.row(k);
    double sum = 0.0;
    for (double v : row) sum += v;
    return sum / static_cast<double>(row.size());
}

struct ForgettingResult {
    std::vector<double> per_task;  // f_j^k for j = 1..k-1
    double mean = 0.0;             // F_k
};

/// f_j^k = max_{l<k} a(l,j) - a(k,j): how far task j has dropped from its best
/// past accuracy. Negative values mean the task improved after it was learned.
inline ForgettingResult forgetting(const AccuracyMatrix& a, int k) {
    if (k < 2) throw std::invalid_argument("forgetting: needs k >= 2");
    ForgettingResult out;
    double sum = 0.0;
    for (int j = 1; j < k; ++j) {
        double best = 0.0;
        for (int l = j; l < k; ++l) best = std::max(best, a.at(l, j));
        const double f = best - a.at(k, j);
        out.per_task.push_back(f);
        sum += f;
    }
    out.mean = sum / static_cast<double>(k - 1);
    return out;
}

/// I_k = a_k* - a(k,k): the cost of learning incrementally instead of jointly.
inline double intransigence(const ReferenceAccuracies& ref, const AccuracyMatrix& a, int k) {
    return ref.at(k) - a.at(k, k);
}

/// Sign labels for the transfer effects. Backward: forgetting below zero means
/// the old task got better (PBT). Forward: negative intransigence means the new
/// task benefited from what came before (PFT).
inline std::string backward_transfer_sign(double f) {
    if (f < 0.0) return "PBT";
    if (f > 0.0) return "NBT";
    return "neutral";
}

inline std::string forward_transfer_sign(double intransigence_value) {
    if (intransigence_value < 0.0) return "PFT";
    if (intransigence_value > 0.0) return "NFT";
    return "neutral";
}

struct TransferSigns {
    std::vector<std::string> backward;  // per f_j^k
    std::string forward;                // from I_k
};

inline TransferSigns transfer_signs(const std::vector<double>& f_values,
                                    double intransigence_value) {
    TransferSigns out;
    for (double f : f_values) out.backward.push_back(backward_transfer_sign(f));
    out.forward = forward_transfer_sign(intransigence_value);
    return out;
}

}  // namespace continual
