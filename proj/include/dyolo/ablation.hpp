#pragma once

// Sweep over module combinations and seeds. The clear-feature teacher
// depends only on the seed and the data, so it is trained once per seed and
// shared by every variant that uses it.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dyolo/config.hpp"

namespace dyolo {

struct AblationRow {
  std::string variant;
  std::vector<double> map;  // one entry per seed, in seed order
  double median = 0;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;  // ranked by median, best first
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Ranked by median mAP; equal medians keep variant order.
inline void rank_rows(AblationTable& t) {
  for (auto& r : t.rows) r.median = median(r.map);
  std::stable_sort(t.rows.begin(), t.rows.end(),
                   [](const AblationRow& a, const AblationRow& b) { return a.median > b.median; });
}

inline void write_ablation_table(std::ostream& os, const AblationTable& t) {
  os << "rank\tvariant";
  for (auto s : t.seeds) os << "\tseed_" << s;
  os << "\tmedian\n";
  os << std::fixed << std::setprecision(6);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    os << i + 1 << '\t' << t.rows[i].variant;
    for (double m : t.rows[i].map) os << '\t' << m;
    os << '\t' << t.rows[i].median << '\n';
  }
  os.unsetf(std::ios::floatfield);
}

inline AblationTable read_ablation_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_ablation_table: cannot open " + path.string());
  AblationTable t;
  std::string line;
  std::getline(in, line);
  {
    std::istringstream head(line);
    std::string col;
    while (std::getline(head, col, '\t'))
      if (col.rfind("seed_", 0) == 0) t.seeds.push_back(std::stoull(col.substr(5)));
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string rank, cell;
    AblationRow r;
    std::getline(ss, rank, '\t');
    std::getline(ss, r.variant, '\t');
    for (std::size_t i = 0; i < t.seeds.size(); ++i) {
      if (!std::getline(ss, cell, '\t')) throw ValidationError("read_ablation_table: short row: " + line);
      r.map.push_back(std::stod(cell));
    }
    if (!std::getline(ss, cell, '\t')) throw ValidationError("read_ablation_table: missing median: " + line);
    r.median = std::stod(cell);
    t.rows.push_back(std::move(r));
  }
  return t;
}

// Trains every variant for every seed under out_dir/<variant>/seed_<s> and
// records the final test-split mAP.
inline AblationTable run_ablation(const ConfigTree& base, const Dataset& data, const std::vector<std::string>& variants,
                                  const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir,
                                  std::ostream* log = nullptr) {
  if (variants.empty() || seeds.empty()) throw ValidationError("ablate: need at least one variant and one seed");
  AblationTable table;
  table.seeds = seeds;
  for (const auto& v : variants) table.rows.push_back({v, {}, 0});
  for (auto seed : seeds) {
    std::optional<DYolo<float>> teacher;
    for (auto& row : table.rows) {
      ConfigTree cfg = base;
      cfg.set("model.ablation", row.variant);
      cfg.set("train.seed", std::to_string(seed));
      auto setup = train_setup(cfg);
      const auto dir = out_dir / row.variant / ("seed_" + std::to_string(seed));
      std::filesystem::remove_all(dir);
      Trainer trainer(setup, data, dir);
      if (setup.model.use_cfe) {
        if (!teacher) {
          teacher.emplace(pretrain_cfe(data.train, setup.model, setup.train, setup.train.cfe_epochs));
        }
        trainer.model().load_cfe_backbone(teacher->backbone());
      }
      trainer.run(std::nullopt, nullptr);
      const double m = trainer.history().back().val_map;
      row.map.push_back(m);
      save_checkpoint(dir / "inference.ckpt", trainer.inference_checkpoint());
      if (log) *log << "ablate " << row.variant << " seed " << seed << " mAP " << m << std::endl;
    }
  }
  rank_rows(table);
  return table;
}

}  // namespace dyolo
