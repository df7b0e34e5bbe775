#include "gtgm/metrics.hpp"

#include "gtgm/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

namespace gtgm::metrics {

using volumes::LabelKind;
using volumes::LabelVolume;

void ContingencyTable::add(Label a, Label b, std::uint64_t count) {
    if (count == 0) return;
    cells[{a, b}] += count;
    marginal_a[a] += count;
    marginal_b[b] += count;
    n += count;
}

void ContingencyTable::merge(const ContingencyTable& other) {
    for (const auto& [key, c] : other.cells) add(key.first, key.second, c);
}

ContingencyTable contingency(std::span<const Label> a, std::span<const Label> b, bool exclude_background) {
    require(a.size() == b.size(), ErrorKind::dimension,
            "contingency inputs differ in length: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    // Dense run-length counting first; the map only sees distinct pairs.
    std::map<std::pair<Label, Label>, std::uint64_t> counts;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (exclude_background && a[i] == 0) continue;
        ++counts[{a[i], b[i]}];
    }
    ContingencyTable t;
    for (const auto& [key, c] : counts) t.add(key.first, key.second, c);
    return t;
}

ContingencyTable contingency(const LabelVolume& a, const LabelVolume& b, bool exclude_background) {
    require(a.dims == b.dims, ErrorKind::dimension, "label dims " + a.dims.str() + " and " + b.dims.str() + " differ");
    require(a.labels.size() == a.dims.count() && b.labels.size() == b.dims.count(), ErrorKind::dimension,
            "label volume length does not match dims");
    return contingency(std::span<const Label>(a.labels), std::span<const Label>(b.labels), exclude_background);
}

ContingencyTable contingency_tiled(const LabelVolume& a, const LabelVolume& b, bool exclude_background, Dims3 tile) {
    require(a.dims == b.dims, ErrorKind::dimension, "label dims " + a.dims.str() + " and " + b.dims.str() + " differ");
    require(tile.z > 0 && tile.y > 0 && tile.x > 0, ErrorKind::config, "tile dims must be positive");
    const Dims3 d = a.dims;
    ContingencyTable total;
    for (std::size_t z0 = 0; z0 < d.z; z0 += tile.z)
        for (std::size_t y0 = 0; y0 < d.y; y0 += tile.y)
            for (std::size_t x0 = 0; x0 < d.x; x0 += tile.x) {
                std::vector<Label> ta, tb;
                for (std::size_t z = z0; z < std::min(d.z, z0 + tile.z); ++z)
                    for (std::size_t y = y0; y < std::min(d.y, y0 + tile.y); ++y)
                        for (std::size_t x = x0; x < std::min(d.x, x0 + tile.x); ++x) {
                            ta.push_back(a.at(z, y, x));
                            tb.push_back(b.at(z, y, x));
                        }
                total.merge(contingency(ta, tb, exclude_background));
            }
    return total;
}

VoiResult voi(const ContingencyTable& t, LogBase base) {
    require(t.n >= 1, ErrorKind::degeneracy, "variation of information needs a non-empty table");
    const double n = static_cast<double>(t.n);
    auto plogp = [n](std::uint64_t c) {
        const double p = static_cast<double>(c) / n;
        return c == 0 ? 0.0 : p * std::log(p);
    };
    double h_ab = 0.0, h_a = 0.0, h_b = 0.0;
    for (const auto& [key, c] : t.cells) h_ab -= plogp(c);
    for (const auto& [l, c] : t.marginal_a) h_a -= plogp(c);
    for (const auto& [l, c] : t.marginal_b) h_b -= plogp(c);
    VoiResult r;
    // Clamp tiny negative rounding residue.
    r.split = std::max(0.0, h_ab - h_b);
    r.merge = std::max(0.0, h_ab - h_a);
    if (base == LogBase::bits) {
        r.split /= std::log(2.0);
        r.merge /= std::log(2.0);
    }
    r.total = r.split + r.merge;
    return r;
}

namespace {

double pairs(std::uint64_t c) { return 0.5 * static_cast<double>(c) * static_cast<double>(c - (c > 0 ? 1 : 0)); }

} // namespace

ArandResult arand_detail(const ContingencyTable& t) {
    require(t.n >= 2, ErrorKind::degeneracy, "adapted Rand error needs at least two voxels");
    double sum_ab = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& [key, c] : t.cells) sum_ab += pairs(c);
    for (const auto& [l, c] : t.marginal_a) sum_a += pairs(c);
    for (const auto& [l, c] : t.marginal_b) sum_b += pairs(c);
    ArandResult r;
    r.precision = sum_b > 0.0 ? sum_ab / sum_b : 1.0;
    r.recall = sum_a > 0.0 ? sum_ab / sum_a : 1.0;
    if (sum_a == 0.0 && sum_b == 0.0) {
        r.error = 0.0;
    } else if (sum_ab == 0.0) {
        r.precision = sum_b > 0.0 ? 0.0 : r.precision;
        r.recall = sum_a > 0.0 ? 0.0 : r.recall;
        r.error = 1.0;
    } else {
        r.error = 1.0 - 2.0 * r.precision * r.recall / (r.precision + r.recall);
    }
    r.error = std::clamp(r.error, 0.0, 1.0);
    return r;
}

double arand(const ContingencyTable& t) { return arand_detail(t).error; }

DiceResult dice(const LabelVolume& pred, const LabelVolume& gt, const std::vector<Label>& classes) {
    require(!classes.empty(), ErrorKind::config, "dice needs a non-empty class set");
    require(pred.dims == gt.dims, ErrorKind::dimension, "label dims " + pred.dims.str() + " and " + gt.dims.str() + " differ");
    require(pred.kind == LabelKind::semantic && gt.kind == LabelKind::semantic, ErrorKind::config,
            "dice expects semantic labelings");
    std::map<Label, std::uint64_t> p_count, g_count, both;
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        ++p_count[pred.labels[i]];
        ++g_count[gt.labels[i]];
        if (pred.labels[i] == gt.labels[i]) ++both[gt.labels[i]];
    }
    DiceResult r;
    double sum = 0.0;
    std::size_t counted = 0;
    const bool only_background = std::all_of(classes.begin(), classes.end(), [](Label c) { return c == 0; });
    for (Label c : std::set<Label>(classes.begin(), classes.end())) {
        const double denom = static_cast<double>(p_count[c] + g_count[c]);
        const double v = denom == 0.0 ? 1.0 : 2.0 * static_cast<double>(both[c]) / denom;
        r.per_class[c] = v;
        if (c != 0 || only_background) {
            sum += v;
            ++counted;
        }
    }
    r.mean = sum / static_cast<double>(counted);
    return r;
}

LabelVolume argmax(const FeatureMap& logits) {
    require(logits.channels >= 1, ErrorKind::dimension, "argmax needs at least one channel");
    LabelVolume out;
    out.dims = logits.dims;
    out.kind = LabelKind::semantic;
    out.labels.assign(logits.plane(), 0);
    for (std::size_t c = 0; c < logits.channels; ++c) out.classes.push_back(static_cast<Label>(c));
    for (std::size_t i = 0; i < logits.plane(); ++i) {
        double best = logits.data[i];
        for (std::size_t c = 1; c < logits.channels; ++c) {
            const double v = logits.data[c * logits.plane() + i];
            if (v > best) {
                best = v;
                out.labels[i] = static_cast<Label>(c);
            }
        }
    }
    return out;
}

LabelVolume instances_from_argmax(const LabelVolume& semantic) {
    const Dims3 d = semantic.dims;
    require(semantic.labels.size() == d.count(), ErrorKind::dimension, "label volume length does not match dims");
    LabelVolume out;
    out.dims = d;
    out.kind = LabelKind::instance;
    out.labels.assign(d.count(), 0);
    Label next = 0;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < d.count(); ++start) {
        const Label cls = semantic.labels[start];
        if (cls == 0 || out.labels[start] != 0) continue;
        out.labels[start] = ++next;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            const auto z = static_cast<std::ptrdiff_t>(i / (d.y * d.x));
            const auto y = static_cast<std::ptrdiff_t>((i / d.x) % d.y);
            const auto x = static_cast<std::ptrdiff_t>(i % d.x);
            for (std::ptrdiff_t dz = -1; dz <= 1; ++dz)
                for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
                    for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
                        const auto nz = z + dz, ny = y + dy, nx = x + dx;
                        if (nz < 0 || ny < 0 || nx < 0 || nz >= static_cast<std::ptrdiff_t>(d.z) ||
                            ny >= static_cast<std::ptrdiff_t>(d.y) || nx >= static_cast<std::ptrdiff_t>(d.x))
                            continue;
                        const std::size_t j = d.index(static_cast<std::size_t>(nz), static_cast<std::size_t>(ny),
                                                      static_cast<std::size_t>(nx));
                        if (semantic.labels[j] == cls && out.labels[j] == 0) {
                            out.labels[j] = next;
                            stack.push_back(j);
                        }
                    }
        }
    }
    return out;
}

LabelVolume instances_from_argmax(const FeatureMap& logits) { return instances_from_argmax(argmax(logits)); }

std::string MetricReport::to_csv() const {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "metric,class_or_side,value\n";
    if (dice) {
        for (const auto& [c, v] : dice->per_class) out << "dice," << c << ',' << v << '\n';
        out << "dice,mean," << dice->mean << '\n';
    }
    if (voi) {
        out << "voi,split," << voi->split << '\n';
        out << "voi,merge," << voi->merge << '\n';
        out << "voi,total," << voi->total << '\n';
    }
    if (arand) out << "arand,all," << arand->error << '\n';
    return out.str();
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    if (dice) {
        nlohmann::json per = nlohmann::json::object();
        for (const auto& [c, v] : dice->per_class) per[std::to_string(c)] = v;
        j["dice"] = {{"per_class", per}, {"mean", dice->mean}};
    }
    if (voi) {
        j["voi"] = {{"split", voi->split},
                    {"merge", voi->merge},
                    {"total", voi->total},
                    {"units", voi_base == LogBase::nats ? "nats" : "bits"}};
    }
    if (arand) j["arand"] = {{"error", arand->error}, {"precision", arand->precision}, {"recall", arand->recall}};
    return j;
}

MetricReport evaluate_semantic(const LabelVolume& pred, const LabelVolume& gt, const std::vector<Label>& classes) {
    MetricReport r;
    r.dice = dice(pred, gt, classes);
    return r;
}

MetricReport evaluate_instances(const LabelVolume& pred, const LabelVolume& gt, bool exclude_background, LogBase base) {
    const auto t = contingency(gt, pred, exclude_background);
    MetricReport r;
    r.voi_base = base;
    r.voi = voi(t, base);
    r.arand = arand_detail(t);
    return r;
}

} // namespace gtgm::metrics
