#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "norm/data.hpp"

using namespace norm;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("binary loader single record and empty file") {
    const auto path = temp_path("normkd_single.bin");
    {
        std::ofstream f(path, std::ios::binary);
        f.put(3);
        for (int i = 0; i < 2 * 2 * 2; ++i) f.put(static_cast<char>(255));
    }
    BinaryMeta meta{2, 2, 2, 4, false};
    auto ds = load_binary_dataset(path, meta);
    CHECK(ds.size() == 1);
    CHECK(ds.labels[0] == 3);
    for (double v : ds.images.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));

    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
    }
    auto empty = load_binary_dataset(path, meta);
    CHECK(empty.size() == 0);
}

TEST_CASE("binary loader error cases") {
    const auto path = temp_path("normkd_bad.bin");
    {
        std::ofstream f(path, std::ios::binary);
        f.put(0);
        f.put(10);  // 2 bytes, record size is 1 + 8
    }
    BinaryMeta meta{2, 2, 2, 4, false};
    CHECK_THROWS_AS(load_binary_dataset(path, meta), DataError);

    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.put(9);  // label >= num_classes
        for (int i = 0; i < 8; ++i) f.put(0);
    }
    CHECK_THROWS_AS(load_binary_dataset(path, meta), DataError);
}

TEST_CASE("binary round trip through the writer helper") {
    Dataset ds;
    ds.num_classes = 5;
    ds.images = Tensor(Shape{2, 3, 2, 1});
    for (std::size_t i = 0; i < ds.images.numel(); ++i)
        ds.images.data[i] = static_cast<double>((i * 37) % 256) / 255.0;
    ds.labels = {4, 1};

    const auto path = temp_path("normkd_rt.bin");
    save_binary_dataset(ds, path);
    auto back = load_binary_dataset(path, BinaryMeta{3, 2, 1, 5, false});
    CHECK(back.labels == ds.labels);
    for (std::size_t i = 0; i < ds.images.numel(); ++i)
        CHECK(back.images.data[i] == doctest::Approx(ds.images.data[i]).epsilon(1e-12));

    // and the files themselves are byte-identical on re-save
    const auto path2 = temp_path("normkd_rt2.bin");
    save_binary_dataset(back, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("per-channel standardization") {
    const auto path = temp_path("normkd_std.bin");
    {
        std::ofstream f(path, std::ios::binary);
        for (int rec = 0; rec < 4; ++rec) {
            f.put(0);
            for (int i = 0; i < 4; ++i) f.put(static_cast<char>(rec * 60 + i));
        }
    }
    auto ds = load_binary_dataset(path, BinaryMeta{2, 2, 1, 1, true});
    double mean = 0.0;
    for (double v : ds.images.data) mean += v;
    mean /= static_cast<double>(ds.images.numel());
    CHECK(std::abs(mean) < 1e-12);
    double var = 0.0;
    for (double v : ds.images.data) var += v * v;
    CHECK(var / static_cast<double>(ds.images.numel()) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("synthetic generator determinism and sigma=0") {
    auto a = generate_synthetic(3, 4, 2, 2, 1, 0.0, 99);
    auto b = generate_synthetic(3, 4, 2, 2, 1, 0.0, 99);
    CHECK(a.images.data == b.images.data);
    CHECK(a.labels == b.labels);

    // sigma=0: all samples of a class equal its template
    const std::size_t pix = 2 * 2 * 1;
    for (int k = 0; k < 3; ++k)
        for (int s = 1; s < 4; ++s)
            for (std::size_t p = 0; p < pix; ++p)
                CHECK(a.images.data[(k * 4 + s) * pix + p] == a.images.data[(k * 4) * pix + p]);

    auto c = generate_synthetic(3, 4, 2, 2, 1, 0.0, 100);
    CHECK(c.images.data != a.images.data);
}

TEST_CASE("synthetic splits share templates but not noise") {
    auto train = generate_synthetic(2, 3, 2, 2, 1, 0.0, 7, "train");
    auto test = generate_synthetic(2, 3, 2, 2, 1, 0.0, 7, "test");
    CHECK(train.images.data == test.images.data);  // sigma 0: template only

    auto train_n = generate_synthetic(2, 3, 2, 2, 1, 0.3, 7, "train");
    auto test_n = generate_synthetic(2, 3, 2, 2, 1, 0.3, 7, "test");
    CHECK(train_n.images.data != test_n.images.data);
}

TEST_CASE("synthetic values stay in [0,1] and validate inputs") {
    auto ds = generate_synthetic(2, 10, 3, 3, 2, 5.0, 1);
    for (double v : ds.images.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(generate_synthetic(0, 1, 2, 2, 1, 0.1, 1), ValueError);
    CHECK_THROWS_AS(generate_synthetic(2, 1, 2, 2, 1, -0.1, 1), ValueError);
}

TEST_CASE("batch iterator covers each sample exactly once per epoch") {
    for (std::size_t n : {1UL, 7UL, 64UL, 100UL}) {
        auto batches = make_batches(n, 8, 5, 0);
        std::vector<std::size_t> seen;
        for (const auto& b : batches) seen.insert(seen.end(), b.indices.begin(), b.indices.end());
        CHECK(seen.size() == n);
        std::sort(seen.begin(), seen.end());
        for (std::size_t i = 0; i < n; ++i) CHECK(seen[i] == i);
    }
}

TEST_CASE("batch iterator edge cases and determinism") {
    auto one = make_batches(5, 100, 1, 0);
    REQUIRE(one.size() == 1);
    CHECK(one[0].indices.size() == 5);

    auto a = make_batches(50, 8, 3, 2);
    auto b = make_batches(50, 8, 3, 2);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].indices == b[i].indices);

    auto c = make_batches(50, 8, 3, 3);  // different epoch -> different order
    CHECK(a[0].indices != c[0].indices);

    CHECK_THROWS_AS(make_batches(10, 0, 1, 0), ValueError);
}

TEST_CASE("sample_batch gathers rows in order") {
    auto ds = generate_synthetic(2, 2, 2, 2, 1, 0.1, 3);
    auto batch = ds.sample_batch({3, 0});
    const std::size_t pix = 4;
    for (std::size_t p = 0; p < pix; ++p) {
        CHECK(batch->data[p] == ds.images.data[3 * pix + p]);
        CHECK(batch->data[pix + p] == ds.images.data[p]);
    }
    CHECK(ds.sample_labels({3, 0}) == std::vector<int>{1, 0});
}
