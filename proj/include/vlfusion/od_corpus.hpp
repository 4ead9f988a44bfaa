#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vlfusion/errors.hpp"

namespace vlfusion {

// One class of one source detection dataset. Names and aliases are kept
// normalized (lowercase, single-spaced); canonical_name is always a member
// of aliases.
struct ClassEntry {
  std::string canonical_name;
  std::set<std::string> aliases;
  std::string source_dataset;
  std::int64_t instance_count = 0;
};

// A class of the unified vocabulary, with provenance back to the sources
// it absorbed.
struct MergedClass {
  std::string canonical_name;
  std::set<std::string> aliases;
  std::vector<std::string> sources;                // in merge order, unique
  std::map<std::string, int> source_class_ids;     // dataset name -> class id there
  std::int64_t instance_count = 0;
};

struct MergedVocabulary {
  std::vector<MergedClass> entries;

  // index of the entry owning this alias, or -1
  int index_of_alias(const std::string& normalized) const;
};

struct ImageRecord {
  std::string image_id;
  std::vector<int> class_ids;  // one per annotation instance
};

enum class SamplingMode { full_copies, class_aware };

struct DatasetSpec {
  std::string name;
  std::vector<ImageRecord> image_records;
  SamplingMode mode = SamplingMode::full_copies;
  int min_per_class = 2000;  // class-aware quota (CA-2k default)
  int k_copies = 1;
};

// lowercase, trim, collapse internal whitespace; throws DataError if the
// result is empty
std::string normalize_class_name(const std::string& raw);

// Unify detection vocabularies: keep base classes with at least
// min_instances instances, fold every other-dataset class into the first
// vocabulary entry whose alias set it intersects (base first, then
// previously appended classes), append the rest as new classes. Ambiguous
// matches and alias collisions fail loudly.
MergedVocabulary merge_vocabularies(const std::vector<ClassEntry>& base,
                                    const std::vector<std::vector<ClassEntry>>& others,
                                    std::int64_t min_instances = 30);

// Class-aware sampling: repeated seeded-shuffled passes over the dataset,
// accepting every image that contains a class still short of its quota at
// the start of the pass. Quotas count annotation instances with
// multiplicity, so tail classes are reached by repeating their images.
// Stops when every class with any instances has at least min_per_class
// sampled instances, or after 100 * |dataset| draws.
std::vector<std::string> class_aware_sample(const DatasetSpec& spec, int min_per_class,
                                            std::uint64_t rng_seed);

struct ScheduleEntry {
  std::string dataset;
  std::string image_id;
};

// k copies of each dataset's (possibly class-aware sampled) image list,
// globally shuffled.
std::vector<ScheduleEntry> build_epoch_schedule(const std::vector<DatasetSpec>& specs,
                                                std::uint64_t rng_seed);

// Alias-file / merged-vocabulary TSV round trip. Lines are
//   canonical<TAB>alias...<TAB>provenance...
// where provenance columns start with "sources=", "ids=" or "count=".
MergedVocabulary load_vocabulary(const std::string& path);
void save_vocabulary(const MergedVocabulary& vocab, const std::string& path);
std::vector<ClassEntry> load_alias_file(const std::string& path, const std::string& dataset_name);

}  // namespace vlfusion
