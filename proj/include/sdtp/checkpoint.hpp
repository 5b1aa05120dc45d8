#pragma once

// Checkpoint container: a single JSON document holding the model config,
// named parameter arrays (raw little-endian bytes, base64), scorer
// parameters, the schedule, and training metadata. Round-trips are
// bit-exact at the stored precision.

#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "sdtp/model.hpp"
#include "sdtp/objectives.hpp"
#include "sdtp/schedule.hpp"
#include "sdtp/scorer.hpp"

namespace sdtp {

inline constexpr int kCheckpointVersion = 1;

template <typename Real>
const char* dtype_name() {
    if constexpr (sizeof(Real) == 4)
        return "f32";
    else
        return "f64";
}

template <typename Real>
nlohmann::json mat_to_json(const Mat<Real>& m) {
    nlohmann::json j;
    j["shape"] = {m.rows, m.cols};
    j["dtype"] = dtype_name<Real>();
    j["data"] = base64_encode(m.data.data(), m.data.size() * sizeof(Real));
    return j;
}

template <typename Real>
Mat<Real> mat_from_json(const nlohmann::json& j) {
    Mat<Real> m(j.at("shape").at(0).get<int>(), j.at("shape").at(1).get<int>());
    if (j.at("dtype").get<std::string>() != dtype_name<Real>())
        throw std::runtime_error("checkpoint: dtype mismatch, stored " +
                                 j.at("dtype").get<std::string>() + " but loading " +
                                 dtype_name<Real>());
    auto bytes = base64_decode(j.at("data").get<std::string>());
    if (bytes.size() != m.data.size() * sizeof(Real))
        throw std::runtime_error("checkpoint: array byte size mismatch");
    std::memcpy(m.data.data(), bytes.data(), bytes.size());
    return m;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},   {"d_model", c.d_model},
            {"n_heads", c.n_heads},     {"d_ff", c.d_ff},
            {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
            {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.validate();
    return c;
}

inline nlohmann::json schedule_to_json(const PruneSchedule& s) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& st : s.stages) stages.push_back({{"layer", st.layer}, {"keep", st.keep_ratio}});
    return {{"stages", stages}, {"sink_count", s.sink_count}, {"local_fraction", s.local_fraction}};
}

inline PruneSchedule schedule_from_json(const nlohmann::json& j) {
    PruneSchedule s;
    for (const auto& st : j.at("stages"))
        s.stages.push_back({st.at("layer").get<int>(), st.at("keep").get<double>()});
    s.sink_count = j.at("sink_count").get<int>();
    s.local_fraction = j.at("local_fraction").get<double>();
    return s;
}

struct CheckpointMeta {
    uint64_t config_hash = 0;
    int64_t steps = 0;
    std::optional<LossReport> final_loss;
};

template <typename Real>
struct Checkpoint {
    ModelParams<Real> model;
    ScorerSet<Real> scorers;
    PruneSchedule schedule;
    CheckpointMeta meta;
};

template <typename Real>
void save_checkpoint(const Checkpoint<Real>& ck, const std::string& path) {
    nlohmann::json j;
    j["format_version"] = kCheckpointVersion;
    j["kind"] = "sdtp-checkpoint";
    j["model"]["config"] = config_to_json(ck.model.config);
    j["model"]["frozen"] = ck.model.frozen;
    nlohmann::json params;
    const_cast<ModelParams<Real>&>(ck.model).for_each_param(
        [&](const std::string& name, Mat<Real>& m) { params[name] = mat_to_json(m); });
    j["model"]["params"] = std::move(params);
    j["model"]["checksum"] = ck.model.checksum();

    nlohmann::json sc;
    sc["d_model"] = ck.scorers.d_model;
    sc["d_hidden"] = ck.scorers.d_hidden;
    nlohmann::json sp;
    const_cast<ScorerSet<Real>&>(ck.scorers).for_each_param(
        [&](const std::string& name, Mat<Real>& m) { sp[name] = mat_to_json(m); });
    sc["params"] = std::move(sp);
    sc["n_stages"] = ck.scorers.stages.size();
    sc["checksum"] = ck.scorers.checksum();
    j["scorers"] = std::move(sc);

    j["schedule"] = schedule_to_json(ck.schedule);
    j["meta"]["config_hash"] = ck.meta.config_hash;
    j["meta"]["steps"] = ck.meta.steps;
    if (ck.meta.final_loss) {
        const auto& fl = *ck.meta.final_loss;
        j["meta"]["final_loss"] = {{"cls", fl.cls},
                                   {"mse", fl.mse},
                                   {"rank", fl.rank},
                                   {"total", fl.total}};
        if (fl.ratio) j["meta"]["final_loss"]["ratio"] = *fl.ratio;
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
    out << j.dump();
}

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    nlohmann::json j;
    in >> j;
    if (j.at("kind").get<std::string>() != "sdtp-checkpoint")
        throw std::runtime_error("checkpoint: unrecognized container kind");
    if (j.at("format_version").get<int>() != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported format version");

    Checkpoint<Real> ck;
    ck.model.config = config_from_json(j.at("model").at("config"));
    ck.model.frozen = j.at("model").value("frozen", true);
    // allocate shapes, then overwrite from the stored arrays
    ck.model = [&] {
        auto m = init_model<Real>(ck.model.config);
        m.frozen = ck.model.frozen;
        return m;
    }();
    const auto& params = j.at("model").at("params");
    ck.model.for_each_param([&](const std::string& name, Mat<Real>& m) {
        m = mat_from_json<Real>(params.at(name));
    });
    if (j.at("model").contains("checksum") &&
        j.at("model").at("checksum").get<uint64_t>() != ck.model.checksum())
        throw std::runtime_error("checkpoint: model checksum mismatch");

    const auto& sc = j.at("scorers");
    ck.scorers.d_model = sc.at("d_model").get<int>();
    ck.scorers.d_hidden = sc.at("d_hidden").get<int>();
    int n_stages = sc.at("n_stages").get<int>();
    ck.scorers = init_scorers<Real>(ck.scorers.d_model, n_stages, 0, 0.0, ck.scorers.d_hidden);
    const auto& sp = sc.at("params");
    ck.scorers.for_each_param([&](const std::string& name, Mat<Real>& m) {
        m = mat_from_json<Real>(sp.at(name));
    });
    if (sc.contains("checksum") && sc.at("checksum").get<uint64_t>() != ck.scorers.checksum())
        throw std::runtime_error("checkpoint: scorer checksum mismatch");

    ck.schedule = schedule_from_json(j.at("schedule"));
    ck.meta.config_hash = j.at("meta").at("config_hash").get<uint64_t>();
    ck.meta.steps = j.at("meta").at("steps").get<int64_t>();
    return ck;
}

}  // namespace sdtp
