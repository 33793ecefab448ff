#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "sokd/data.hpp"
#include "oracles.hpp"

using sokd::Dataset;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / "sokd_data_test") { fs::create_directories(path); }
    ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

void push_u32_be(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

// hand-authored 3-image 2x2 IDX fixture
std::pair<fs::path, fs::path> make_idx_fixture(const TempDir& dir, std::uint32_t image_magic,
                                               std::uint32_t n_images, std::uint32_t n_labels) {
    std::vector<unsigned char> img;
    push_u32_be(img, image_magic);
    push_u32_be(img, n_images);
    push_u32_be(img, 2);
    push_u32_be(img, 2);
    for (std::uint32_t i = 0; i < n_images * 4; ++i)
        img.push_back(static_cast<unsigned char>(i * 20));
    std::vector<unsigned char> lab;
    push_u32_be(lab, 0x00000801u);
    push_u32_be(lab, n_labels);
    for (std::uint32_t i = 0; i < n_labels; ++i) lab.push_back(static_cast<unsigned char>(i % 2));
    const fs::path ip = dir.path / "images.idx", lp = dir.path / "labels.idx";
    write_bytes(ip, img);
    write_bytes(lp, lab);
    return {ip, lp};
}

}  // namespace

TEST_CASE("load_idx reads the hand-authored fixture") {
    TempDir dir;
    auto [ip, lp] = make_idx_fixture(dir, 0x00000803u, 3, 3);
    Dataset ds = sokd::load_idx(ip.string(), lp.string());
    CHECK(ds.size() == 3);
    CHECK(ds.inputs.shape() == sokd::Shape{3, 1, 2, 2});
    CHECK(ds.labels == std::vector<int>{0, 1, 0});
    CHECK(ds.class_count == 2);
    // first pixel of second image is byte 80 -> 80/255
    CHECK(std::fabs(ds.inputs.data()[4] - 80.0f / 255.0f) < 1e-6f);

    SECTION("corrupted magic") {
        auto [bad_ip, bad_lp] = make_idx_fixture(dir, 0xdeadbeefu, 3, 3);
        CHECK_THROWS_AS(sokd::load_idx(bad_ip.string(), bad_lp.string()), sokd::FormatError);
    }
    SECTION("count mismatch") {
        auto [ci, cl] = make_idx_fixture(dir, 0x00000803u, 3, 4);
        CHECK_THROWS_AS(sokd::load_idx(ci.string(), cl.string()), sokd::CountMismatch);
    }
    SECTION("missing file") {
        CHECK_THROWS_AS(sokd::load_idx((dir.path / "no.idx").string(), lp.string()),
                        sokd::IoError);
    }
    SECTION("truncated pixel payload") {
        std::vector<unsigned char> img;
        push_u32_be(img, 0x00000803u);
        push_u32_be(img, 3);
        push_u32_be(img, 2);
        push_u32_be(img, 2);
        img.push_back(1);  // 1 of 12 pixel bytes
        const fs::path tp = dir.path / "trunc.idx";
        write_bytes(tp, img);
        CHECK_THROWS_AS(sokd::load_idx(tp.string(), lp.string()), sokd::FormatError);
    }
}

TEST_CASE("load_csv maps labels in first-seen order") {
    TempDir dir;
    const fs::path p = dir.path / "data.csv";
    {
        std::ofstream out(p);
        out << "f1,f2,f3,species\n";
        out << "1.0,2.0,3.0,cat\n";
        out << "4.0,5.0,6.0,dog\n";
        out << "7.5,8.5,9.5,cat\n";
        out << "-1.0,0.0,1.0,bird\n";
    }
    Dataset ds = sokd::load_csv(p.string(), "species");
    CHECK(ds.size() == 4);
    CHECK(ds.class_count == 3);
    CHECK(ds.inputs.shape() == sokd::Shape{4, 3});
    CHECK(ds.labels == std::vector<int>{0, 1, 0, 2});
    CHECK(ds.label_names == std::vector<std::string>{"cat", "dog", "bird"});
    CHECK(ds.inputs.data()[3] == 4.0f);

    SECTION("non-numeric cell names row and column") {
        const fs::path bad = dir.path / "bad.csv";
        {
            std::ofstream out(bad);
            out << "a,b,label\n1,2,x\n1,oops,y\n";
        }
        try {
            sokd::load_csv(bad.string(), "label");
            FAIL("expected ParseError");
        } catch (const sokd::ParseError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("row 3") != std::string::npos);
            CHECK(msg.find("'b'") != std::string::npos);
        }
    }
    SECTION("missing label column") {
        CHECK_THROWS_AS(sokd::load_csv(p.string(), "nope"), sokd::ParseError);
    }
    SECTION("manifest records the label map") {
        const std::string manifest = sokd::dataset_manifest(ds);
        CHECK(manifest.find("label_map = 0:cat 1:dog 2:bird") != std::string::npos);
        CHECK(manifest.find("checksum = ") != std::string::npos);
    }
}

TEST_CASE("synth_blobs is deterministic and separable at zero spread") {
    auto a = sokd::synth_blobs(1, 4, 8, 10, 0.0f);
    auto b = sokd::synth_blobs(1, 4, 8, 10, 0.0f);
    CHECK(std::vector<float>(a.train.inputs.data().begin(), a.train.inputs.data().end()) ==
          std::vector<float>(b.train.inputs.data().begin(), b.train.inputs.data().end()));
    CHECK(a.train.labels == b.train.labels);

    // zero spread: every point sits on its cluster center, nearest-center
    // scores 100
    const double acc = oracle::nearest_center_accuracy(
        std::vector<float>(a.test.inputs.data().begin(), a.test.inputs.data().end()), 8,
        a.test.labels, a.centers, a.center_labels);
    CHECK(acc == 100.0);

    auto c = sokd::synth_blobs(2, 4, 8, 10, 0.0f);
    CHECK(std::vector<float>(a.train.inputs.data().begin(), a.train.inputs.data().end()) !=
          std::vector<float>(c.train.inputs.data().begin(), c.train.inputs.data().end()));

    // 80/20 split counts
    CHECK(a.train.size() == 4 * 8);
    CHECK(a.test.size() == 4 * 2);

    CHECK_THROWS_AS(sokd::synth_blobs(1, 1, 8, 10, 1.0f), sokd::InvalidArg);
    CHECK_THROWS_AS(sokd::synth_blobs(1, 4, 1, 10, 1.0f), sokd::InvalidArg);
    CHECK_THROWS_AS(sokd::synth_blobs(1, 4, 8, 1, 1.0f), sokd::InvalidArg);
}

TEST_CASE("nearest-center oracle accuracy on the reference blobs") {
    // the acceptance-scale dataset: C=4, d=8, m=313 -> 1000 train points
    auto blobs = sokd::synth_blobs(1, 4, 8, 313, 1.0f);
    CHECK(blobs.train.size() == 1000);
    const double acc = oracle::nearest_center_accuracy(
        std::vector<float>(blobs.test.inputs.data().begin(), blobs.test.inputs.data().end()), 8,
        blobs.test.labels, blobs.centers, blobs.center_labels);
    // with unit spread on radius-3 centers the rule is strong but not perfect
    CHECK(acc > 80.0);
    CHECK(acc <= 100.0);
}

TEST_CASE("batches visit each index exactly once") {
    auto blobs = sokd::synth_blobs(5, 3, 4, 10, 0.5f);
    const Dataset& ds = blobs.train;  // 24 samples
    sokd::BatchPlan plan;
    plan.batch_size = 7;
    plan.seed = 9;

    auto bs = sokd::batches(ds, plan, 0);
    std::int64_t total = 0;
    for (const auto& b : bs) total += static_cast<std::int64_t>(b.labels.size());
    CHECK(total == ds.size());
    REQUIRE(bs.size() == 4);  // 7+7+7+3
    CHECK(bs.back().labels.size() == 3);

    // permutation property via the raw index interface
    auto perm = sokd::batch_permutation(ds.size(), plan.seed, 0);
    std::set<std::int64_t> seen(perm.begin(), perm.end());
    CHECK(static_cast<std::int64_t>(seen.size()) == ds.size());

    // same (seed, epoch) -> same order; different epoch -> different order
    auto perm2 = sokd::batch_permutation(ds.size(), plan.seed, 0);
    CHECK(perm == perm2);
    CHECK(perm != sokd::batch_permutation(ds.size(), plan.seed, 1));

    SECTION("drop_last skips the partial batch") {
        plan.drop_last = true;
        auto dropped = sokd::batches(ds, plan, 0);
        CHECK(dropped.size() == 3);
        for (const auto& b : dropped) CHECK(b.labels.size() == 7);
    }
    SECTION("batch_size >= n gives one batch") {
        plan.batch_size = 100;
        auto one = sokd::batches(ds, plan, 0);
        REQUIRE(one.size() == 1);
        CHECK(static_cast<std::int64_t>(one[0].labels.size()) == ds.size());
    }
}
