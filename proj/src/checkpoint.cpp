#include "cvslt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cvslt/errors.hpp"

namespace cvslt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[] = "CVSLT1";
constexpr std::uint8_t kDtypeF64 = 1;

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_doubles(std::string& out, const std::vector<double>& values) {
  out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<double> get_doubles(std::size_t n) {
    if (n > (bytes_.size() - pos_) / sizeof(double)) throw IoError("checkpoint truncated");
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint capture(const CvSltModel& model, std::uint64_t step, std::uint64_t seed, std::string config_json,
                   OptimizerState optimizer) {
  Checkpoint c;
  for (const auto& p : model.parameters().all()) {
    const auto v = p.value.values();
    c.parameters.push_back({p.name, p.value.shape(), {v.begin(), v.end()}});
  }
  c.step = step;
  c.seed = seed;
  c.config_json = std::move(config_json);
  c.optimizer = std::move(optimizer);
  return c;
}

void restore(const Checkpoint& checkpoint, CvSltModel& model) {
  auto& store = model.parameters();
  if (checkpoint.parameters.size() != store.size()) {
    for (const auto& p : store.all()) {
      bool found = false;
      for (const auto& r : checkpoint.parameters) found = found || r.name == p.name;
      if (!found) throw ContractError("checkpoint lacks parameter " + p.name);
    }
    for (const auto& r : checkpoint.parameters) {
      if (!store.find(r.name)) throw ContractError("checkpoint has unexpected parameter " + r.name);
    }
  }
  for (const auto& r : checkpoint.parameters) {
    const Parameter* p = store.find(r.name);
    if (!p) throw ContractError("checkpoint has unexpected parameter " + r.name);
    if (p->value.shape() != r.shape) {
      throw ContractError("parameter " + r.name + " has shape " + shape_str(r.shape) + " in checkpoint but " +
                          shape_str(p->value.shape()) + " in model");
    }
  }
  for (const auto& r : checkpoint.parameters) {
    Tensor t = store.find(r.name)->value;
    std::copy(r.values.begin(), r.values.end(), t.data().begin());
  }
}

std::string serialize(const Checkpoint& c) {
  std::string out(kMagic, 6);
  put<std::uint64_t>(out, c.parameters.size());
  for (const auto& p : c.parameters) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put<std::uint8_t>(out, kDtypeF64);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) put<std::uint64_t>(out, d);
    put_doubles(out, p.values);
  }
  put<std::uint64_t>(out, c.step);
  put<std::uint64_t>(out, c.seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.config_json.size()));
  out += c.config_json;
  put<std::uint64_t>(out, c.optimizer.t);
  put<std::uint64_t>(out, c.optimizer.m.size());
  for (std::size_t i = 0; i < c.optimizer.m.size(); ++i) {
    put_doubles(out, c.optimizer.m[i]);
    put_doubles(out, c.optimizer.v[i]);
  }
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  Reader in(bytes);
  if (in.get_string(6) != std::string(kMagic, 6)) throw IoError("not a CVSLT1 checkpoint");
  Checkpoint c;
  const auto n = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    ParameterRecord r;
    r.name = in.get_string(in.get<std::uint32_t>());
    if (in.get<std::uint8_t>() != kDtypeF64) throw IoError("unsupported dtype for parameter " + r.name);
    const auto rank = in.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(in.get<std::uint64_t>());
    r.values = in.get_doubles(shape_numel(r.shape));
    c.parameters.push_back(std::move(r));
  }
  c.step = in.get<std::uint64_t>();
  c.seed = in.get<std::uint64_t>();
  c.config_json = in.get_string(in.get<std::uint32_t>());
  c.optimizer.t = in.get<std::uint64_t>();
  const auto moments = in.get<std::uint64_t>();
  if (moments != 0 && moments != n) throw IoError("optimizer state does not match the parameter count");
  for (std::uint64_t i = 0; i < moments; ++i) {
    const auto numel = c.parameters[i].values.size();
    c.optimizer.m.push_back(in.get_doubles(numel));
    c.optimizer.v.push_back(in.get_doubles(numel));
  }
  if (!in.done()) throw IoError("trailing bytes after checkpoint");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = serialize(checkpoint);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace cvslt
