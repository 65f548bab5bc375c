#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "infobottle/checkpoint.hpp"
#include "infobottle/config.hpp"
#include "infobottle/rng.hpp"

using namespace infobottle;

namespace {

Checkpoint sample_checkpoint() {
  Rng rng(11);
  Checkpoint c;
  c.step = 42;
  c.config = "model.d = 32\n";
  Tensor a(Shape{3, 4});
  for (double& v : a.data) v = rng.normal();
  Tensor b(Shape{5});
  for (double& v : b.data) v = rng.normal();
  c.tensors.push_back({"enc.w", a});
  c.tensors.push_back({"enc.b", b});
  c.tensors.push_back({"scalar", Tensor::scalar(-0.0)});
  return c;
}

CheckpointError::Kind decode_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("decode unexpectedly succeeded");
  return CheckpointError::Kind::io;
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bit identical") {
    const Checkpoint c = sample_checkpoint();
    const auto path = (std::filesystem::temp_directory_path() / "ibrt_roundtrip.ckpt").string();
    save_checkpoint(c, path);
    const Checkpoint d = load_checkpoint(path);
    CHECK(d.step == 42);
    CHECK(d.config == c.config);
    REQUIRE(d.tensors.size() == c.tensors.size());
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
      CHECK(d.tensors[i].name == c.tensors[i].name);
      CHECK(d.tensors[i].tensor.shape == c.tensors[i].tensor.shape);
      CHECK(std::memcmp(d.tensors[i].tensor.data.data(), c.tensors[i].tensor.data.data(),
                        8 * c.tensors[i].tensor.size()) == 0);
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("header layout") {
    const auto bytes = encode_checkpoint(sample_checkpoint());
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "IBRT");
    CHECK(bytes[4] == Checkpoint::kVersion);
  }

  TEST_CASE("every corrupted byte is detected") {
    const auto bytes = encode_checkpoint(sample_checkpoint());
    for (std::size_t i = 8; i < bytes.size(); ++i) {
      auto bad = bytes;
      bad[i] ^= 0x5a;
      CHECK(decode_kind(bad) == CheckpointError::Kind::checksum);
    }
  }

  TEST_CASE("bad magic, version and truncation") {
    auto bytes = encode_checkpoint(sample_checkpoint());
    auto magic = bytes;
    magic[0] = 'X';
    CHECK(decode_kind(magic) == CheckpointError::Kind::bad_magic);
    auto version = bytes;
    version[4] = 9;
    CHECK(decode_kind(version) == CheckpointError::Kind::version_mismatch);
    CHECK(decode_kind(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 2)) ==
          CheckpointError::Kind::truncated);
    auto shorter = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 9);
    CHECK(decode_kind(shorter) != CheckpointError::Kind::io);
  }

  TEST_CASE("missing tensor lists expected names") {
    const Checkpoint c = sample_checkpoint();
    try {
      c.require({"enc.w", "head.w", "head.b"});
      FAIL("expected an error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::missing_tensor);
      const std::string msg = e.what();
      CHECK(msg.find("head.w, head.b") != std::string::npos);
      CHECK(msg.find("expected [enc.w, head.w, head.b]") != std::string::npos);
    }
  }

  TEST_CASE("crc32 matches the standard check value") {
    const std::string s = "123456789";
    CHECK(crc32_of(std::vector<std::uint8_t>(s.begin(), s.end())) == 0xCBF43926u);
  }
}

TEST_SUITE("config") {
  struct Sample {
    double lr = 0.1;
    std::size_t epochs = 5;
    bool freeze = true;
    std::string mode = "standard";
    void reg(FieldRegistry& r) {
      r.add("train.lr", lr, "learning rate");
      r.add("train.epochs", epochs, "epochs");
      r.add("train.freeze", freeze, "freeze embeddings");
      r.add_choice("train.mode", mode, {"standard", "adversarial"}, "loop");
    }
  };

  TEST_CASE("parse, apply and dump round trip") {
    Sample s;
    FieldRegistry r;
    s.reg(r);
    r.apply(parse_key_values("# comment\n train.lr = 0.25 # trailing\n\ntrain.mode=adversarial\n"));
    CHECK(s.lr == 0.25);
    CHECK(s.mode == "adversarial");
    Sample t;
    FieldRegistry r2;
    t.reg(r2);
    r2.apply(parse_key_values(r.dump()));
    CHECK(r2.dump() == r.dump());
  }

  TEST_CASE("unknown key names key and line") {
    Sample s;
    FieldRegistry r;
    s.reg(r);
    try {
      r.apply(parse_key_values("train.lr = 1\ntrain.bogus = 3\n"));
      FAIL("expected an error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("train.bogus") != std::string::npos);
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }

  TEST_CASE("typed validation") {
    Sample s;
    FieldRegistry r;
    s.reg(r);
    CHECK_THROWS_AS(r.set("train.epochs", "-1"), ConfigError);
    CHECK_THROWS_AS(r.set("train.lr", "fast"), ConfigError);
    CHECK_THROWS_AS(r.set("train.freeze", "maybe"), ConfigError);
    CHECK_THROWS_AS(r.set("train.mode", "other"), ConfigError);
    CHECK_THROWS_AS(parse_key_values("no equals sign"), ConfigError);
  }

  TEST_CASE("help lists defaults") {
    Sample s;
    FieldRegistry r;
    s.reg(r);
    r.set("train.lr", "3");
    const std::string h = r.help();
    CHECK(h.find("train.lr") != std::string::npos);
    CHECK(h.find("[default: 0.1]") != std::string::npos);
  }
}
