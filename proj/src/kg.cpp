#include "aggre/kg.hpp"

#include <fstream>
#include <iostream>
#include <unordered_map>

#include "aggre/errors.hpp"

namespace aggre {

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

std::int32_t Vocab::intern(const std::string& label) {
  auto it = ids.find(label);
  if (it != ids.end()) return it->second;
  std::int32_t id = size();
  ids.emplace(label, id);
  labels.push_back(label);
  return id;
}

std::int32_t Vocab::lookup(const std::string& label) const {
  auto it = ids.find(label);
  return it == ids.end() ? -1 : it->second;
}

std::vector<std::int32_t> KnowledgeGraph::split_triple_ids(Split s) const {
  std::vector<std::int32_t> out;
  for (std::size_t i = 0; i < triples.size(); ++i)
    if (splits[i] == s) out.push_back(static_cast<std::int32_t>(i));
  return out;
}

std::size_t KnowledgeGraph::split_count(Split s) const {
  std::size_t n = 0;
  for (Split x : splits) n += (x == s);
  return n;
}

namespace {

// Dedup key; the field widths bound the supported graph size.
constexpr std::int32_t kMaxEntities = 1 << 24;
constexpr std::int32_t kMaxRelations = 1 << 16;

std::uint64_t triple_key(const Triple& t) {
  return (static_cast<std::uint64_t>(t.head) << 40) |
         (static_cast<std::uint64_t>(t.rel) << 24) |
         static_cast<std::uint64_t>(t.tail);
}

void load_split(const std::string& path, Split split, KnowledgeGraph& kg,
                std::unordered_map<std::uint64_t, std::int32_t>& seen) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path);

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::size_t tab1 = line.find('\t');
    std::size_t tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    std::size_t tab3 = tab2 == std::string::npos ? std::string::npos : line.find('\t', tab2 + 1);
    if (tab1 == std::string::npos || tab2 == std::string::npos || tab3 != std::string::npos) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": expected head<TAB>relation<TAB>tail");
    }

    Triple t;
    t.head = kg.entities.intern(line.substr(0, tab1));
    t.rel = kg.relations.intern(line.substr(tab1 + 1, tab2 - tab1 - 1));
    t.tail = kg.entities.intern(line.substr(tab2 + 1));
    if (kg.num_entities() > kMaxEntities || kg.num_relations() > kMaxRelations) {
      throw DataError(path + ": vocabulary exceeds supported size (" +
                      std::to_string(kMaxEntities) + " entities / " +
                      std::to_string(kMaxRelations) + " relations)");
    }

    auto [it, inserted] =
        seen.emplace(triple_key(t), static_cast<std::int32_t>(kg.triples.size()));
    if (!inserted) {
      ++kg.duplicates_dropped;
      Split stored = kg.splits[it->second];
      if (stored != split) {
        ++kg.cross_split_dropped;
        std::cerr << "warning: " << path << ":" << line_no << ": triple already in "
                  << split_name(stored) << " split, dropped from " << split_name(split)
                  << "\n";
      }
      continue;
    }
    kg.triples.push_back(t);
    kg.splits.push_back(split);
  }
}

}  // namespace

KnowledgeGraph load_dataset(const std::string& train_path,
                            const std::string& valid_path,
                            const std::string& test_path) {
  KnowledgeGraph kg;
  std::unordered_map<std::uint64_t, std::int32_t> seen;
  load_split(train_path, Split::train, kg, seen);
  load_split(valid_path, Split::valid, kg, seen);
  load_split(test_path, Split::test, kg, seen);
  if (kg.split_count(Split::train) == 0)
    throw ConfigError("train split is empty: " + train_path);
  return kg;
}

ContextIndex build_context_index(const KnowledgeGraph& kg, SplitFilter filter) {
  const std::int32_t num_entities = kg.num_entities();
  const std::int32_t num_relations = kg.num_relations();

  ContextIndex ctx;
  ctx.triple_to_ctx.assign(kg.triples.size(), -1);
  for (std::size_t i = 0; i < kg.triples.size(); ++i) {
    if (filter.contains(kg.splits[i])) {
      ctx.triple_to_ctx[i] = static_cast<std::int32_t>(ctx.ctx_triples.size());
      ctx.ctx_triples.push_back(static_cast<std::int32_t>(i));
    }
  }
  const std::int64_t num_ctx = ctx.num_ctx_triples();
  ctx.ctx_head.resize(num_ctx);
  ctx.ctx_rel.resize(num_ctx);
  ctx.ctx_tail.resize(num_ctx);
  for (std::int64_t c = 0; c < num_ctx; ++c) {
    const Triple& t = kg.triples[ctx.ctx_triples[c]];
    ctx.ctx_head[c] = t.head;
    ctx.ctx_rel[c] = t.rel;
    ctx.ctx_tail[c] = t.tail;
  }

  // Counting pass.
  std::vector<std::int64_t> ent_count(num_entities, 0);
  std::vector<std::int64_t> rel_count(num_relations, 0);
  for (std::int32_t gid : ctx.ctx_triples) {
    const Triple& t = kg.triples[gid];
    ent_count[t.head] += 1;
    if (t.tail != t.head) ent_count[t.tail] += 1;
    rel_count[t.rel] += 1;
  }

  ctx.ent_offsets.assign(num_entities + 1, 0);
  for (std::int32_t e = 0; e < num_entities; ++e)
    ctx.ent_offsets[e + 1] = ctx.ent_offsets[e] + ent_count[e];
  ctx.rel_offsets.assign(num_relations + 1, 0);
  for (std::int32_t r = 0; r < num_relations; ++r)
    ctx.rel_offsets[r + 1] = ctx.rel_offsets[r] + rel_count[r];

  const std::int64_t num_ent_pairs = ctx.ent_offsets[num_entities];
  const std::int64_t num_rel_pairs = ctx.rel_offsets[num_relations];
  ctx.ent_rel.resize(num_ent_pairs);
  ctx.ent_nbr.resize(num_ent_pairs);
  ctx.ent_src.resize(num_ent_pairs);
  ctx.ent_twin.resize(num_ent_pairs);
  ctx.rel_head.resize(num_rel_pairs);
  ctx.rel_tail.resize(num_rel_pairs);
  ctx.rel_src.resize(num_rel_pairs);
  ctx.head_pair.resize(num_ctx);
  ctx.tail_pair.resize(num_ctx);
  ctx.rel_pair.resize(num_ctx);

  // Fill pass in triple-id order, so every segment ends up sorted by source
  // triple id.
  std::vector<std::int64_t> ent_cursor(ctx.ent_offsets.begin(), ctx.ent_offsets.end() - 1);
  std::vector<std::int64_t> rel_cursor(ctx.rel_offsets.begin(), ctx.rel_offsets.end() - 1);
  for (std::int64_t c = 0; c < num_ctx; ++c) {
    const Triple& t = kg.triples[ctx.ctx_triples[c]];
    const std::int32_t ci = static_cast<std::int32_t>(c);

    std::int64_t ph = ent_cursor[t.head]++;
    ctx.ent_rel[ph] = t.rel;
    ctx.ent_nbr[ph] = t.tail;
    ctx.ent_src[ph] = ci;
    ctx.head_pair[c] = static_cast<std::int32_t>(ph);

    if (t.tail != t.head) {
      std::int64_t pt = ent_cursor[t.tail]++;
      ctx.ent_rel[pt] = t.rel;
      ctx.ent_nbr[pt] = t.head;
      ctx.ent_src[pt] = ci;
      ctx.tail_pair[c] = static_cast<std::int32_t>(pt);
      ctx.ent_twin[ph] = static_cast<std::int32_t>(pt);
      ctx.ent_twin[pt] = static_cast<std::int32_t>(ph);
    } else {
      ctx.tail_pair[c] = static_cast<std::int32_t>(ph);
      ctx.ent_twin[ph] = static_cast<std::int32_t>(ph);
    }

    std::int64_t pr = rel_cursor[t.rel]++;
    ctx.rel_head[pr] = t.head;
    ctx.rel_tail[pr] = t.tail;
    ctx.rel_src[pr] = ci;
    ctx.rel_pair[c] = static_cast<std::int32_t>(pr);
  }

  return ctx;
}

}  // namespace aggre
