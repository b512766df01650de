#pragma once

#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <vector>

#include "vqlogits/bench/cost.hpp"
#include "vqlogits/bench/timing.hpp"

namespace vqlogits {

struct CostReport {
  HeadSpec spec;
  std::size_t batch = 0, seq = 0;
  std::size_t params = 0;
  std::uint64_t weight_bytes = 0;
  std::uint64_t mapping_bytes = 0;
  std::uint64_t flops = 0;
  std::optional<LatencyStats> latency;
  std::optional<double> speedup;
  std::optional<double> ppl;
};

// Grid over heads x K (or d_rank / shortlist) x V at fixed d_model, B, S.
// Full ignores K but still gets one row per grid cell.
struct SweepSpec {
  std::vector<HeadKind> heads{HeadKind::kFull, HeadKind::kVQ};
  std::vector<std::size_t> ks{256, 1024, 4096};
  std::vector<std::size_t> vocabs{32768};
  std::size_t d_model = 256;
  std::size_t batch = 8;
  std::size_t seq = 128;
  std::size_t repetitions = 20;
  std::uint64_t seed = 0;
  Precision precision = Precision::kFp32;
  bool timing = true;
};

// A measured perplexity to attach to the matching grid row.
struct PplEntry {
  HeadKind kind;
  std::size_t vocab;
  std::size_t k_or_rank;  // ignored for Full
  double ppl;
};

inline HeadSpec grid_spec(HeadKind kind, std::size_t vocab, std::size_t d_model, std::size_t k) {
  if (kind == HeadKind::kAdaptive) return adaptive_spec(vocab, d_model, k);
  HeadSpec s{kind, vocab, d_model, kind == HeadKind::kFull ? 0 : k, {}, {}};
  validate_spec(s);
  return s;
}

inline std::vector<CostReport> sweep_report(const SweepSpec& sweep,
                                            const std::vector<PplEntry>& ppl = {}) {
  if (sweep.heads.empty() || sweep.ks.empty() || sweep.vocabs.empty()) {
    throw ConfigError("sweep grid is empty");
  }
  std::vector<CostReport> rows;
  for (std::size_t vocab : sweep.vocabs) {
    const std::size_t first = rows.size();
    for (HeadKind kind : sweep.heads) {
      for (std::size_t k : sweep.ks) {
        CostReport r;
        r.spec = grid_spec(kind, vocab, sweep.d_model, k);
        r.batch = sweep.batch;
        r.seq = sweep.seq;
        const MemoryReport mem = memory_report(r.spec, sweep.precision);
        r.params = mem.params;
        r.weight_bytes = mem.weight_bytes;
        r.mapping_bytes = mem.mapping_bytes;
        r.flops = flops_logits(r.spec, sweep.batch, sweep.seq);
        if (kind == HeadKind::kFull) r.speedup = 1.0;
        for (const auto& e : ppl) {
          if (e.kind == kind && e.vocab == vocab && (kind == HeadKind::kFull || e.k_or_rank == k)) {
            r.ppl = e.ppl;
          }
        }
        rows.push_back(r);
      }
    }
    if (!sweep.timing) continue;

    // One kernel per distinct head shape, plus the Full baseline.
    Rng rng(sweep.seed);
    std::map<std::pair<int, std::size_t>, std::size_t> slot;
    std::vector<std::unique_ptr<LogitKernel>> kernels;
    auto kernel_for = [&](const HeadSpec& s) {
      const auto key = std::make_pair(static_cast<int>(s.kind), s.k_or_rank);
      auto it = slot.find(key);
      if (it != slot.end()) return it->second;
      kernels.push_back(std::make_unique<LogitKernel>(LogitKernel::random(s, rng)));
      slot[key] = kernels.size() - 1;
      return kernels.size() - 1;
    };
    const std::size_t full = kernel_for(grid_spec(HeadKind::kFull, vocab, sweep.d_model, 0));
    std::vector<std::size_t> row_kernel;
    for (std::size_t i = first; i < rows.size(); ++i) row_kernel.push_back(kernel_for(rows[i].spec));
    std::vector<LogitKernel*> ptrs;
    for (auto& k : kernels) ptrs.push_back(k.get());
    const TensorF h = probe_hidden(sweep.batch * sweep.seq, sweep.d_model, sweep.seed);
    const auto stats = time_kernels(ptrs, h, sweep.repetitions);
    for (std::size_t i = first; i < rows.size(); ++i) {
      const std::size_t k = row_kernel[i - first];
      rows[i].latency = stats[k];
      rows[i].speedup = stats[full].median_ms / stats[k].median_ms;
    }
  }
  return rows;
}

inline void write_report_csv(std::ostream& out, const std::vector<CostReport>& rows) {
  out << "head,V,K_or_rank,d_model,B,S,params,weight_bytes,mapping_bytes,flops,lat_ms_median,"
         "lat_ms_p10,lat_ms_p90,speedup,ppl\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line.precision(9);
    const std::size_t k = r.spec.kind == HeadKind::kFull ? r.spec.vocab : r.spec.k_or_rank;
    line << head_kind_name(r.spec.kind) << ',' << r.spec.vocab << ',' << k << ','
         << r.spec.d_model << ',' << r.batch << ',' << r.seq << ',' << r.params << ','
         << r.weight_bytes << ',' << r.mapping_bytes << ',' << r.flops << ',';
    if (r.latency) line << r.latency->median_ms << ',' << r.latency->p10_ms << ',' << r.latency->p90_ms;
    else line << ",,";
    line << ',';
    if (r.speedup) line << *r.speedup;
    line << ',';
    if (r.ppl) line << *r.ppl;
    out << line.str() << '\n';
  }
}

}  // namespace vqlogits
