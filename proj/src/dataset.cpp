#include "s4m/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "s4m/vocab.hpp"

namespace fs = std::filesystem;

namespace s4m {

const std::vector<Example>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  fail("unknown split: " + name);
}

std::vector<float> Dataset::label_vector(const Example& e) const {
  std::vector<float> v(label_names.size(), 0.0f);
  for (const auto& f : e.findings) {
    auto it = std::lower_bound(label_names.begin(), label_names.end(), f);
    if (it != label_names.end() && *it == f) v[static_cast<size_t>(it - label_names.begin())] = 1.0f;
  }
  return v;
}

SynthSpec SynthSpec::defaults(int per_region) {
  SynthSpec s;
  for (RegionTag r : all_regions()) s.counts[region_name(r)] = per_region;
  return s;
}

SynthSpec SynthSpec::load(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open synth spec: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    fail("malformed synth spec " + path + ": " + e.what());
  }
  SynthSpec s = defaults();
  if (j.contains("counts")) {
    s.counts.clear();
    for (auto& [k, v] : j.at("counts").items()) {
      parse_region(k);
      s.counts[k] = v.get<int>();
    }
  }
  if (j.contains("findings_per_region")) s.findings_per_region = j["findings_per_region"].get<int>();
  if (j.contains("max_findings_per_example")) s.max_findings_per_example = j["max_findings_per_example"].get<int>();
  if (j.contains("image_size")) s.image_size = j["image_size"].get<int>();
  if (j.contains("bg_amplitude")) s.bg_amplitude = j["bg_amplitude"].get<double>();
  if (j.contains("noise_sigma")) s.noise_sigma = j["noise_sigma"].get<double>();
  if (j.contains("glyph_intensity")) s.glyph_intensity = j["glyph_intensity"].get<double>();
  if (j.contains("min_report_tokens")) s.min_report_tokens = j["min_report_tokens"].get<int>();
  if (j.contains("max_report_tokens")) s.max_report_tokens = j["max_report_tokens"].get<int>();
  return s;
}

std::string SynthSpec::to_json() const {
  nlohmann::json j;
  j["counts"] = counts;
  j["findings_per_region"] = findings_per_region;
  j["max_findings_per_example"] = max_findings_per_example;
  j["image_size"] = image_size;
  j["bg_amplitude"] = bg_amplitude;
  j["noise_sigma"] = noise_sigma;
  j["glyph_intensity"] = glyph_intensity;
  j["min_report_tokens"] = min_report_tokens;
  j["max_report_tokens"] = max_report_tokens;
  return j.dump(1);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

const std::vector<std::string>& eligible_findings(RegionTag tag) {
  static const std::vector<std::vector<std::string>> lists = {
      /* chest    */ {"cardiomegaly", "effusion", "pneumonia", "pneumothorax", "edema", "opacity"},
      /* abdomen  */ {"obstruction", "consolidation", "faecal", "gas", "surgical", "degenerative"},
      /* knee     */ {"effusion", "dislocation", "fracture", "lucency", "prosthesis", "swelling"},
      /* hip      */ {"fracture", "sclerosis", "lucency", "periprosthetic", "acetabular", "symphysis"},
      /* wrist    */ {"fracture", "angulation", "displacement", "swelling", "cast", "plate"},
      /* shoulder */ {"fracture", "dislocation", "calcification", "cuff", "glenoid", "tuberosity"},
  };
  return lists[static_cast<size_t>(tag)];
}

namespace {

const std::vector<std::string>& openers(RegionTag tag) {
  static const std::vector<std::vector<std::string>> lists = {
      {"two views of the chest are reviewed .", "frontal and lateral chest radiographs are obtained ."},
      {"two views of the abdomen are reviewed .", "supine and erect abdominal radiographs are obtained ."},
      {"two views of the knee are reviewed .", "frontal and lateral knee radiographs are obtained ."},
      {"two views of the hip are reviewed .", "frontal and lateral hip radiographs are obtained ."},
      {"two views of the wrist are reviewed .", "frontal and lateral wrist radiographs are obtained ."},
      {"two views of the shoulder are reviewed .", "frontal and axillary shoulder radiographs are obtained ."},
  };
  return lists[static_cast<size_t>(tag)];
}

// Padding statements deliberately avoid every eligible finding word of every
// region so report text and label vectors stay mutually consistent.
const std::vector<std::string>& padding_pool(RegionTag tag) {
  static const std::vector<std::vector<std::string>> lists = {
      {
          "the heart is normal in size .",
          "the mediastinal contours are within normal limits .",
          "the lungs are clear bilaterally .",
          "no focal abnormality is seen in the lung fields .",
          "the osseous structures of the thorax are intact .",
          "the trachea is midline .",
          "both costophrenic angles are sharp .",
          "the visualized soft tissues are unremarkable .",
          "the cardiac silhouette is stable in appearance .",
          "the pulmonary vascularity is within normal limits .",
      },
      {
          "the bowel pattern is within normal limits .",
          "no dilated loops are identified .",
          "the visualized lung bases are clear .",
          "the osseous structures are unremarkable .",
          "the psoas shadows are preserved .",
          "there is a normal distribution of abdominal contents .",
          "the hernial orifices are unremarkable .",
          "no organomegaly is appreciated .",
          "the flank stripes are preserved .",
          "no abnormal calcific density is projected over the abdomen .",
      },
      {
          "the knee joint spaces are preserved .",
          "the bones are normally mineralized .",
          "the patella is normally positioned .",
          "the visualized soft tissues are within normal limits .",
          "no radiopaque foreign body is identified .",
          "the tibiofemoral alignment is anatomic .",
          "the extensor mechanism appears intact .",
          "no suprapatellar abnormality is seen .",
          "the femoral condyles appear normal .",
          "the proximal tibia and fibula are unremarkable .",
      },
      {
          "both hip joints are congruent .",
          "the femoral heads are well seated .",
          "the pelvic ring is intact .",
          "the sacroiliac joints are symmetric .",
          "the bones are normally mineralized .",
          "the visualized soft tissues are unremarkable .",
          "no periarticular abnormality is seen .",
          "the proximal femora appear normal .",
          "the obturator foramina are symmetric .",
          "the pubic rami are intact .",
      },
      {
          "the carpal bones maintain normal relationships .",
          "the radiocarpal joint space is preserved .",
          "the distal radius and ulna appear normal .",
          "the bones are normally mineralized .",
          "the visualized soft tissues are within normal limits .",
          "no radiopaque foreign body is identified .",
          "the wrist alignment is anatomic .",
          "the ulnar styloid is unremarkable .",
          "the metacarpal bases appear normal .",
          "the scaphoid contour is preserved .",
      },
      {
          "the glenohumeral joint is congruent .",
          "the acromioclavicular joint is preserved .",
          "the humeral head is normally positioned .",
          "the bones are normally mineralized .",
          "the visualized soft tissues are unremarkable .",
          "no subacromial abnormality is seen .",
          "the clavicle appears intact .",
          "the scapula is unremarkable .",
          "the visualized ribs are normal .",
          "the humeral shaft is unremarkable .",
      },
  };
  return lists[static_cast<size_t>(tag)];
}

struct Glyph {
  int shape;      // index into the shape family
  double cy, cx;  // center in [0,1] image coordinates
  double size;    // half extent in pixels at 256
};

void draw_glyph(Image& im, const Glyph& g, double intensity) {
  const int cy = static_cast<int>(g.cy * im.h);
  const int cx = static_cast<int>(g.cx * im.w);
  const int r = static_cast<int>(g.size);
  auto bump = [&](int y, int x, double v) {
    if (y < 0 || y >= im.h || x < 0 || x >= im.w) return;
    for (int ch = 0; ch < im.c; ++ch) {
      double nv = im.at(y, x, ch) + v;
      im.at(y, x, ch) = static_cast<uint8_t>(std::lround(std::clamp(nv, 0.0, 255.0)));
    }
  };
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const double ay = std::abs(dy), ax = std::abs(dx);
      const double rr = std::sqrt(static_cast<double>(dy * dy + dx * dx));
      bool hit = false;
      switch (g.shape % 6) {
        case 0: hit = rr <= r; break;                                   // disc
        case 1: hit = rr <= r && rr >= 0.62 * r; break;                 // ring
        case 2: hit = ax <= 0.82 * r && ay <= 0.82 * r; break;          // square
        case 3: hit = (ax <= 0.28 * r || ay <= 0.28 * r) && rr <= r; break;  // cross
        case 4: hit = ay + ax <= r; break;                              // diamond
        case 5: hit = ay <= 0.30 * r && ax <= r; break;                 // bar
      }
      if (hit) bump(cy + dy, cx + dx, intensity);
    }
  }
}

void render_background(Image& im, RegionTag tag, const SynthSpec& spec, Rng& rng) {
  const int ri = static_cast<int>(tag);
  const double amp = spec.bg_amplitude;
  const double phase = rng.uniform(0.0, 6.28318530717958647692);
  // Random illumination gradient; nuisance variation shared by no region.
  const double gdir = rng.uniform(0.0, 6.28318530717958647692);
  const double gamp = rng.uniform(4.0, 12.0);
  const double base = rng.uniform(55.0, 75.0);
  for (int y = 0; y < im.h; ++y) {
    for (int x = 0; x < im.w; ++x) {
      const double u = static_cast<double>(x) / im.w, v = static_cast<double>(y) / im.h;
      double pat = 0.0;
      switch (ri) {
        case 0: pat = std::sin(2 * M_PI * 5.0 * (u + v) + phase); break;
        case 1: pat = std::sin(2 * M_PI * 6.0 * u + phase); break;
        case 2: pat = std::sin(2 * M_PI * 6.0 * v + phase); break;
        case 3: {
          const double ru = u - 0.5, rv = v - 0.5;
          pat = std::sin(2 * M_PI * 7.0 * std::sqrt(ru * ru + rv * rv) + phase);
          break;
        }
        case 4: pat = std::sin(2 * M_PI * 4.0 * u + phase) * std::sin(2 * M_PI * 4.0 * v + phase); break;
        case 5: pat = std::sin(2 * M_PI * 5.0 * (u - v) + phase); break;
      }
      const double grad = gamp * ((u - 0.5) * std::cos(gdir) + (v - 0.5) * std::sin(gdir));
      const double noise = rng.normal(0.0, spec.noise_sigma);
      const double val = base + amp * pat + grad + noise;
      for (int ch = 0; ch < im.c; ++ch) {
        im.at(y, x, ch) = static_cast<uint8_t>(std::lround(std::clamp(val, 0.0, 255.0)));
      }
    }
  }
}

std::string finding_sentence(const std::string& finding, double cy, Rng& rng) {
  const std::string zone = cy < 0.5 ? "upper" : "lower";
  switch (rng.below(3)) {
    case 0: return "there is " + finding + " in the " + zone + " zone .";
    case 1: return "findings are consistent with " + finding + " in the " + zone + " zone .";
    default: return "evidence of " + finding + " is seen in the " + zone + " zone .";
  }
}

int count_tokens(const std::string& report) {
  return static_cast<int>(Vocab::normalize(report).size());
}

}  // namespace

Dataset synthesize_dataset(const SynthSpec& spec, uint64_t seed, const KnowledgeBase& kb) {
  Dataset ds;
  std::set<std::string> labels;
  int global_index = 0;
  for (RegionTag tag : all_regions()) {
    auto it = spec.counts.find(region_name(tag));
    if (it == spec.counts.end()) continue;
    const int n = it->second;
    check(n > 0, "synth spec: count for " + region_name(tag) + " must be > 0");
    check(spec.findings_per_region >= 1 &&
              spec.findings_per_region <= static_cast<int>(eligible_findings(tag).size()),
          "synth spec: findings_per_region out of range");

    // Eligible findings are a prefix of the curated per-region list; each one
    // must be a member of the region's knowledge subset.
    std::vector<std::string> eligible(eligible_findings(tag).begin(),
                                      eligible_findings(tag).begin() + spec.findings_per_region);
    const auto& subset = kb.region_subset(tag);
    for (const auto& f : eligible) {
      check(std::find(subset.begin(), subset.end(), f) != subset.end(),
            "eligible finding \"" + f + "\" is not in the " + region_name(tag) + " knowledge subset");
      labels.insert(f);
    }

    std::vector<Example> region_examples;
    for (int i = 0; i < n; ++i, ++global_index) {
      Rng rng = Rng::child(seed, "synth-example", static_cast<uint64_t>(global_index));
      Example e;
      char idbuf[64];
      std::snprintf(idbuf, sizeof(idbuf), "%s-%04d", region_name(tag).c_str(), i);
      e.id = idbuf;
      e.tag = tag;

      const int n_findings = static_cast<int>(rng.below(spec.max_findings_per_example + 1));
      std::vector<int> finding_ids(eligible.size());
      for (size_t k = 0; k < finding_ids.size(); ++k) finding_ids[k] = static_cast<int>(k);
      rng.shuffle(finding_ids);
      finding_ids.resize(static_cast<size_t>(n_findings));
      std::sort(finding_ids.begin(), finding_ids.end());

      // Quadrant placement: distinct quadrants so glyphs never overlap, with
      // jitter small enough that a 224 crop of the 256 render keeps each
      // glyph in its vertical half.
      std::vector<int> quadrants = {0, 1, 2, 3};
      rng.shuffle(quadrants);
      std::vector<Glyph> glyphs;
      std::vector<std::string> sentences;
      for (int k = 0; k < n_findings; ++k) {
        const int fid = finding_ids[static_cast<size_t>(k)];
        const int q = quadrants[static_cast<size_t>(k)];
        Glyph g;
        g.shape = fid;
        g.cy = (q / 2 == 0 ? 0.27 : 0.73) + rng.uniform(-0.05, 0.05);
        g.cx = (q % 2 == 0 ? 0.27 : 0.73) + rng.uniform(-0.05, 0.05);
        g.size = rng.uniform(11.0, 15.0);
        glyphs.push_back(g);
        e.findings.push_back(eligible[static_cast<size_t>(fid)]);
        sentences.push_back(finding_sentence(eligible[static_cast<size_t>(fid)], g.cy, rng));
      }

      for (int view = 0; view < 2; ++view) {
        Image im = Image::zeros(spec.image_size, spec.image_size, 1);
        render_background(im, tag, spec, rng);
        for (auto g : glyphs) {
          g.cy += rng.uniform(-0.02, 0.02);
          g.cx += rng.uniform(-0.02, 0.02);
          draw_glyph(im, g, spec.glyph_intensity);
        }
        e.views[static_cast<size_t>(view)] = std::move(im);
      }

      // Report: opener, finding sentences, then region padding up to length.
      std::string report = openers(tag)[static_cast<size_t>(rng.below(2))];
      for (const auto& s : sentences) report += " " + s;
      if (n_findings == 0) report += " no acute abnormality is identified .";
      std::vector<std::string> pads = padding_pool(tag);
      rng.shuffle(pads);
      size_t pi = 0;
      while (count_tokens(report) < spec.min_report_tokens && pi < pads.size()) {
        const std::string& cand = pads[pi++];
        if (count_tokens(report) + count_tokens(cand) > spec.max_report_tokens) continue;
        report += " " + cand;
      }
      check(count_tokens(report) >= spec.min_report_tokens &&
                count_tokens(report) <= spec.max_report_tokens,
            "synthesized report length out of range for " + e.id);
      e.report = report;
      region_examples.push_back(std::move(e));
    }

    // Per-region split, disjoint by construction.
    Rng split_rng = Rng::child(seed, "synth-split", static_cast<uint64_t>(tag));
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    split_rng.shuffle(order);
    const int n_train = static_cast<int>(std::lround(spec.train_frac * n));
    const int n_val = static_cast<int>(std::lround(spec.val_frac * n));
    for (int i = 0; i < n; ++i) {
      Example& e = region_examples[static_cast<size_t>(order[static_cast<size_t>(i)])];
      if (i < n_train) {
        ds.train.push_back(std::move(e));
      } else if (i < n_train + n_val) {
        ds.val.push_back(std::move(e));
      } else {
        ds.test.push_back(std::move(e));
      }
    }
  }
  ds.label_names.assign(labels.begin(), labels.end());
  return ds;
}

// ---------------------------------------------------------------------------
// Manifest I/O

void export_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
  check(manifest.good(), "cannot write manifest under " + dir);
  auto dump_split = [&](const std::vector<Example>& split, const char* name) {
    for (const Example& e : split) {
      nlohmann::json row;
      std::vector<std::string> paths;
      for (int v = 0; v < 2; ++v) {
        std::string rel = "images/" + e.id + "_" + std::to_string(v) + ".png";
        write_png((fs::path(dir) / rel).string(), e.views[static_cast<size_t>(v)]);
        paths.push_back(rel);
      }
      row["id"] = e.id;
      row["image_paths"] = paths;
      row["report"] = e.report;
      row["tag"] = region_name(e.tag);
      row["split"] = name;
      row["findings"] = e.findings;
      manifest << row.dump() << "\n";
    }
  };
  dump_split(ds.train, "train");
  dump_split(ds.val, "val");
  dump_split(ds.test, "test");
}

Dataset load_manifest(const std::string& path, const ManifestOptions& opts) {
  std::ifstream in(path);
  check(in.good(), "cannot open manifest: " + path);
  const fs::path root = fs::path(path).parent_path();
  Dataset ds;
  std::set<std::string> labels;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail("manifest " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    Example e;
    e.id = row.value("id", "row-" + std::to_string(lineno));
    e.report = row.at("report").get<std::string>();
    e.tag = parse_region(row.at("tag").get<std::string>());
    if (row.contains("findings")) {
      e.findings = row["findings"].get<std::vector<std::string>>();
      for (const auto& f : e.findings) labels.insert(f);
    }

    if (opts.filter_length) {
      const int t = static_cast<int>(Vocab::normalize(e.report).size());
      if (t < 30 || t > 60) continue;
    }

    auto paths = row.at("image_paths").get<std::vector<std::string>>();
    check(!paths.empty(), "manifest " + path + " line " + std::to_string(lineno) + ": no image_paths");
    // Two-view rule: singletons duplicate, extras drop (first two listed).
    if (paths.size() == 1) paths.push_back(paths[0]);
    paths.resize(2);
    for (int v = 0; v < 2; ++v) {
      fs::path img_path = fs::path(paths[static_cast<size_t>(v)]);
      if (img_path.is_relative()) img_path = root / img_path;
      if (!fs::exists(img_path)) fail("missing image file: " + img_path.string());
      Image im = read_png(img_path.string());
      if (opts.resize_to > 0 && (im.h != opts.resize_to || im.w != opts.resize_to)) {
        im = resize_bilinear(im, opts.resize_to, opts.resize_to);
      }
      e.views[static_cast<size_t>(v)] = std::move(im);
    }

    const std::string split = row.at("split").get<std::string>();
    if (split == "train") {
      ds.train.push_back(std::move(e));
    } else if (split == "val") {
      ds.val.push_back(std::move(e));
    } else if (split == "test") {
      ds.test.push_back(std::move(e));
    } else {
      fail("manifest " + path + " line " + std::to_string(lineno) + ": unknown split \"" + split + "\"");
    }
  }
  ds.label_names.assign(labels.begin(), labels.end());
  return ds;
}

Image augment(const Image& im, Rng& rng, bool training) {
  check(im.h >= kInputSize && im.w >= kInputSize, "augment: image smaller than 224 after resize");
  if (!training) {
    return crop(im, (im.h - kInputSize) / 2, (im.w - kInputSize) / 2, kInputSize, kInputSize);
  }
  const int y0 = static_cast<int>(rng.below(im.h - kInputSize + 1));
  const int x0 = static_cast<int>(rng.below(im.w - kInputSize + 1));
  Image out = crop(im, y0, x0, kInputSize, kInputSize);
  if (rng.coin(0.5)) out = hflip(out);
  return out;
}

std::vector<std::vector<int>> epoch_batches(int n, int batch_size, Rng& rng, bool drop_singletons) {
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int i = 0; i < n; i += batch_size) {
    std::vector<int> b(order.begin() + i, order.begin() + std::min(n, i + batch_size));
    if (drop_singletons && b.size() < 2) continue;
    batches.push_back(std::move(b));
  }
  return batches;
}

uint64_t dataset_fingerprint(const Dataset& ds) {
  uint64_t h = fnv1a("s4m-dataset");
  auto mix = [&h](const std::vector<Example>& split) {
    for (const Example& e : split) {
      h = fnv1a(e.id, h);
      h = fnv1a(e.report, h);
      h = fnv1a(region_name(e.tag), h);
      for (const Image& im : e.views) {
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(im.px.data()), im.px.size()), h);
      }
    }
  };
  mix(ds.train);
  mix(ds.val);
  mix(ds.test);
  return h;
}

}  // namespace s4m
