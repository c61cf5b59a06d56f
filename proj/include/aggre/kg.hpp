#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace aggre {

enum class Split : std::uint8_t { train = 0, valid = 1, test = 2 };

const char* split_name(Split s);

struct Triple {
  std::int32_t head = 0;
  std::int32_t rel = 0;
  std::int32_t tail = 0;
  bool operator==(const Triple&) const = default;
};

// Bidirectional label<->id map; ids are assigned in first-appearance order.
struct Vocab {
  std::vector<std::string> labels;
  std::unordered_map<std::string, std::int32_t> ids;

  std::int32_t intern(const std::string& label);
  // -1 when absent
  std::int32_t lookup(const std::string& label) const;
  std::int32_t size() const { return static_cast<std::int32_t>(labels.size()); }
};

struct KnowledgeGraph {
  Vocab entities;
  Vocab relations;
  std::vector<Triple> triples;
  std::vector<Split> splits;  // parallel to triples

  std::uint64_t duplicates_dropped = 0;   // repeats of an already-stored triple
  std::uint64_t cross_split_dropped = 0;  // subset of the above: repeat came from a later split

  std::int32_t num_entities() const { return entities.size(); }
  std::int32_t num_relations() const { return relations.size(); }
  std::vector<std::int32_t> split_triple_ids(Split s) const;
  std::size_t split_count(Split s) const;
};

// Reads the three TSV splits (head \t relation \t tail per line). Vocabularies
// cover the union of all splits; duplicate triples are stored once, earliest
// split wins. Missing file -> IoError, malformed line -> DataError with file
// and line number, empty train split -> ConfigError.
KnowledgeGraph load_dataset(const std::string& train_path,
                            const std::string& valid_path,
                            const std::string& test_path);

struct SplitFilter {
  bool train = true;
  bool valid = false;
  bool test = false;
  bool contains(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::valid: return valid;
      case Split::test: return test;
    }
    return false;
  }
};

// CSR contexts over the admitted triples.
//
// Each admitted triple (h,r,t) contributes pair (r,t) to h's entity context,
// (r,h) to t's entity context (one pair total when h == t), and (h,t) to r's
// relation context. Pairs within a segment are ordered by source triple id.
struct ContextIndex {
  // Admitted triples, ascending by global triple id. "Ctx index" below means
  // a position in this array.
  std::vector<std::int32_t> ctx_triples;
  std::vector<std::int32_t> triple_to_ctx;  // global triple id -> ctx index, -1 if absent
  std::vector<std::int32_t> ctx_head, ctx_rel, ctx_tail;  // (h,r,t) per ctx triple

  // Entity contexts.
  std::vector<std::int64_t> ent_offsets;  // num_entities + 1
  std::vector<std::int32_t> ent_rel;      // relation of the pair
  std::vector<std::int32_t> ent_nbr;      // neighbor entity of the pair
  std::vector<std::int32_t> ent_src;      // ctx index of the originating triple
  std::vector<std::int32_t> ent_twin;     // mirrored pair in the neighbor's segment; self for loops

  // Relation contexts.
  std::vector<std::int64_t> rel_offsets;  // num_relations + 1
  std::vector<std::int32_t> rel_head;
  std::vector<std::int32_t> rel_tail;
  std::vector<std::int32_t> rel_src;      // ctx index of the originating triple

  // Per ctx triple: where its pairs landed. tail_pair == head_pair for self-loops.
  std::vector<std::int32_t> head_pair;
  std::vector<std::int32_t> tail_pair;
  std::vector<std::int32_t> rel_pair;

  std::int64_t num_entity_pairs() const { return ent_offsets.empty() ? 0 : ent_offsets.back(); }
  std::int64_t num_relation_pairs() const { return rel_offsets.empty() ? 0 : rel_offsets.back(); }
  std::int64_t num_ctx_triples() const { return static_cast<std::int64_t>(ctx_triples.size()); }

  std::int32_t entity_pair_source(std::int64_t pair) const { return ctx_triples[ent_src[pair]]; }
  std::int32_t relation_pair_source(std::int64_t pair) const { return ctx_triples[rel_src[pair]]; }
};

ContextIndex build_context_index(const KnowledgeGraph& kg, SplitFilter filter = {});

}  // namespace aggre
