#pragma once

// Segmentation metrics on a shared contingency table: Dice for semantic
// labelings, variation of information and adapted Rand error for instances.

#include "gtgm/tensor.hpp"
#include "gtgm/volumes.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace gtgm::metrics {

using Label = std::uint32_t;

struct ContingencyTable {
    std::map<std::pair<Label, Label>, std::uint64_t> cells;
    std::map<Label, std::uint64_t> marginal_a;
    std::map<Label, std::uint64_t> marginal_b;
    std::uint64_t n = 0;

    void add(Label a, Label b, std::uint64_t count = 1);
    // Pure addition, so merge order does not matter.
    void merge(const ContingencyTable& other);
    bool degenerate() const noexcept { return n == 0; }
    bool operator==(const ContingencyTable&) const = default;
};

// When exclude_background is set, voxels whose a-label is 0 are dropped.
ContingencyTable contingency(std::span<const Label> a, std::span<const Label> b, bool exclude_background);
ContingencyTable contingency(const volumes::LabelVolume& a, const volumes::LabelVolume& b, bool exclude_background);
// Same table accumulated tile by tile.
ContingencyTable contingency_tiled(const volumes::LabelVolume& a, const volumes::LabelVolume& b, bool exclude_background,
                                   Dims3 tile);

enum class LogBase { nats, bits };

struct VoiResult {
    double split = 0.0;  // H(A|B)
    double merge = 0.0;  // H(B|A)
    double total = 0.0;
};

VoiResult voi(const ContingencyTable& t, LogBase base = LogBase::nats);

struct ArandResult {
    double error = 0.0;
    double precision = 1.0;
    double recall = 1.0;
};

// Side a is ground truth. Pair sums that are all zero count as perfect
// agreement on that side; see README for the convention.
ArandResult arand_detail(const ContingencyTable& t);
double arand(const ContingencyTable& t);

struct DiceResult {
    std::map<Label, double> per_class;
    double mean = 0.0;
};

// Mean over classes other than 0; if 0 is the only class the mean covers it.
DiceResult dice(const volumes::LabelVolume& pred, const volumes::LabelVolume& gt, const std::vector<Label>& classes);

// Per-voxel argmax over channels, ties to the lowest channel.
volumes::LabelVolume argmax(const FeatureMap& logits);
// 26-connected components of each foreground class, numbered 1..M in scan order.
volumes::LabelVolume instances_from_argmax(const volumes::LabelVolume& semantic);
volumes::LabelVolume instances_from_argmax(const FeatureMap& logits);

struct MetricReport {
    std::optional<DiceResult> dice;
    std::optional<VoiResult> voi;
    std::optional<ArandResult> arand;
    LogBase voi_base = LogBase::nats;

    // Rows of metric,class_or_side,value.
    std::string to_csv() const;
    nlohmann::json to_json() const;
};

MetricReport evaluate_semantic(const volumes::LabelVolume& pred, const volumes::LabelVolume& gt,
                               const std::vector<Label>& classes);
// Ground-truth background excluded by default.
MetricReport evaluate_instances(const volumes::LabelVolume& pred, const volumes::LabelVolume& gt,
                                bool exclude_background = true, LogBase base = LogBase::nats);

} // namespace gtgm::metrics
