#pragma once

// Line-delimited JSON records for induction runs. Reports hold no timing so
// that runs with equal seeds compare byte for byte.

#include <string>

#include <json.hpp>

#include "pim/search.hpp"
#include "pim/trace.hpp"

namespace pim {

inline nlohmann::ordered_json candidate_record(const Candidate& c, std::size_t rank,
                                               const FunctionLibrary& lib = FunctionLibrary::standard())
{
    nlohmann::ordered_json rec;
    rec["type"] = "candidate";
    rec["rank"] = rank;
    rec["program"] = print_with_values(c.program, lib);
    rec["structure"] = print(c.program, lib);
    rec["policy"] = to_string(c.program.policy);
    rec["loss"] = c.loss;
    rec["complexity"] = c.complexity;
    rec["score"] = c.score;
    rec["accepted"] = c.accepted;
    return rec;
}

/// One summary record followed by one record per returned candidate.
inline std::string induce_report(const InduceResult& r, const ErrorSpec& spec,
                                 const FunctionLibrary& lib = FunctionLibrary::standard())
{
    nlohmann::ordered_json head;
    head["type"] = "summary";
    head["spec"] = spec.name;
    head["e_max"] = spec.e_max;
    head["e_acc"] = spec.e_acc;
    head["accepted"] = r.accepted;
    head["iterations"] = r.iterations;
    head["evaluated"] = r.evaluated;
    head["score_checks"] = r.score_checks;
    std::string out = head.dump() + '\n';
    for (std::size_t i = 0; i < r.best.size(); ++i) out += candidate_record(r.best[i], i + 1, lib).dump() + '\n';
    return out;
}

inline std::string progress_record(const ProgressRecord& p)
{
    nlohmann::ordered_json rec;
    rec["type"] = "progress";
    rec["iteration"] = p.iteration;
    rec["queue_size"] = p.queue_size;
    rec["evaluated"] = p.evaluated;
    rec["best_score"] = p.best_score;
    rec["program"] = p.program;
    return rec.dump();
}

} // namespace pim
