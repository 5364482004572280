#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "qure/embedding_store.hpp"
#include "qure/evaluator.hpp"

namespace qure {

// Planted-attribute dataset parameters.
//
// Every image is a sum of one unit direction per attribute (directions of an
// attribute live in their own orthogonal block of the space) plus Gaussian
// noise. A query pairs a reference image with a text vector encoding the
// change of one attribute; its target is the reference with that change
// applied (so it keeps the reference's noise). Each target signature is
// shared by exactly round(false_negative_rate * n_corpus) other corpus items,
// the planted false negatives.
struct SynthConfig {
  std::size_t n_attributes = 4;
  std::size_t dim = 32;
  std::size_t n_corpus = 2000;
  std::size_t n_queries = 500;
  std::size_t n_eval_queries = 0;
  double noise_sigma = 0.05;
  double false_negative_rate = 0.05;
  std::uint64_t seed = 7;
  // Values per attribute; 0 picks min(4, dim / n_attributes).
  std::size_t values_per_attribute = 0;
  // Text vectors are expressed in a seeded random orthonormal basis instead
  // of the image basis, so the fusion head has to learn the mapping.
  bool rotate_text = true;

  void validate() const;  // throws Config
  std::size_t duplicates_per_signature() const;
  std::size_t attribute_values() const;
};

nlohmann::json to_json(const SynthConfig& config);
SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig base = SynthConfig{});

struct SynthDataset {
  EmbeddingMatrix corpus;
  EmbeddingMatrix query_img;
  EmbeddingMatrix query_txt;
  DatasetManifest manifest;       // split "train"
  DatasetManifest eval_manifest;  // split "test"; empty unless n_eval_queries > 0
  std::vector<GroundTruth> truth; // every query of both manifests
  // Generator bookkeeping: attribute value per corpus row, row-major
  // n_corpus x n_attributes, and the text-space rotation (dim x dim).
  std::vector<std::uint32_t> corpus_signatures;
  std::vector<double> text_rotation;
};

SynthDataset generate(const SynthConfig& config);

// Writes corpus.qure, query_img.qure, query_txt.qure, manifest.jsonl,
// eval_manifest.jsonl (when present) and truth.jsonl into `dir`.
void write_synth_dataset(const SynthDataset& data, const std::filesystem::path& dir);

}  // namespace qure
