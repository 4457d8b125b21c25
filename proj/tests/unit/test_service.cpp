#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include <httplib.h>

#include "lsms/errors.hpp"
#include "lsms/rle.hpp"
#include "lsms/service.hpp"
#include "lsms/synthetic.hpp"
#include "lsms/training.hpp"

using namespace lsms;
namespace fs = std::filesystem;

namespace {

LsmsModel toy_model(std::uint64_t seed = 1) {
    torch::manual_seed(seed);
    LsmsModel m(ModelConfig::toy());
    m->eval();
    return m;
}

nlohmann::json parse(const HttpReply &r) { return nlohmann::json::parse(r.body); }

std::string error_code(const HttpReply &r) { return parse(r)["error"]["code"].get<std::string>(); }

std::vector<std::uint8_t> decode_reply_mask(const nlohmann::json &j) {
    const auto counts = j["mask_rle"]["counts"].get<std::vector<std::uint32_t>>();
    return rle_decode(counts, static_cast<std::size_t>(j["height"].get<int>() * j["width"].get<int>()));
}

Image8 gradient_image(int h, int w) {
    Image8 img(3, h, w);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) img.at(c, y, x) = static_cast<std::uint8_t>((x * 7 + y * 3 + c * 50) % 256);
        }
    }
    return img;
}

class ServiceTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / "lsms_service_test";
        fs::remove_all(dir_);
        samples_ = generate_split(4, "demo", 3, GenConfig{});
        write_samples(dir_, "demo", samples_);
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }

    SegmentService &ready_service(int max_side = 2048) {
        ServiceConfig cfg;
        cfg.samples_dir = dir_ / "demo";
        cfg.max_side = max_side;
        service_ = std::make_unique<SegmentService>(cfg);
        service_->set_model(toy_model(), "toy-test");
        return *service_;
    }

    SegmentRequest image_request(const Image8 &img, std::string expression) {
        SegmentRequest r;
        r.image_bytes = encode_png(img);
        r.expression = std::move(expression);
        return r;
    }

    static inline fs::path dir_;
    static inline std::vector<ReferringSample> samples_;
    std::unique_ptr<SegmentService> service_;
};

}  // namespace

TEST(Rle, GoldenVectors) {
    std::ifstream in(fs::path(LSMS_TEST_DATA_DIR) / "rle_golden.json");
    ASSERT_TRUE(in) << "missing golden file";
    const auto golden = nlohmann::json::parse(in);
    for (const auto &c : golden["cases"]) {
        const auto mask = c["mask"].get<std::vector<std::uint8_t>>();
        const auto counts = c["counts"].get<std::vector<std::uint32_t>>();
        EXPECT_EQ(rle_encode(mask), counts) << c.dump();
        EXPECT_EQ(rle_decode(counts, mask.size()), mask) << c.dump();
    }
}

TEST(Rle, RoundTripsRandomMasks) {
    std::mt19937 rng(99);
    std::uniform_int_distribution<int> len(0, 500);
    std::uniform_real_distribution<double> density(0.0, 1.0);
    std::uniform_int_distribution<int> run(1, 40);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = len(rng);
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(n));
        if (trial % 2 == 0) {
            std::bernoulli_distribution bit(density(rng));
            for (auto &x : mask) x = bit(rng);
        } else {
            // Long runs, the typical shape of a segmentation.
            std::uint8_t v = rng() & 1;
            for (int i = 0; i < n;) {
                const int r = run(rng);
                for (int k = 0; k < r && i < n; ++k, ++i) mask[static_cast<std::size_t>(i)] = v;
                v ^= 1;
            }
        }
        const auto counts = rle_encode(mask);
        std::uint64_t total = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            total += counts[i];
            if (i > 0) ASSERT_GT(counts[i], 0u);
        }
        ASSERT_EQ(total, mask.size());
        ASSERT_EQ(rle_decode(counts, mask.size()), mask) << "trial " << trial;
    }
}

TEST(Rle, RejectsMalformedCounts) {
    for (const auto &[counts, length] : std::vector<std::pair<std::vector<std::uint32_t>, std::size_t>>{
             {{2, 0, 1}, 3}, {{2, 3}, 6}, {{2, 3, 4}, 6}, {{}, 0}}) {
        try {
            rle_decode(counts, length);
            ADD_FAILURE() << "accepted malformed counts";
        } catch (const Error &e) {
            EXPECT_EQ(e.code(), ErrorCode::MalformedRecord);
        }
    }
}

TEST(Base64, StandardVectors) {
    const std::vector<std::pair<std::string, std::string>> vectors = {
        {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="}, {"foobar", "Zm9vYmFy"}};
    for (const auto &[plain, encoded] : vectors) {
        EXPECT_EQ(base64_encode(plain), encoded);
        EXPECT_EQ(base64_decode(encoded), plain);
    }
    EXPECT_EQ(base64_decode("data:image/png;base64,Zm9vYmFy"), "foobar");
    std::string binary(256, '\0');
    for (int i = 0; i < 256; ++i) binary[static_cast<std::size_t>(i)] = static_cast<char>(i);
    EXPECT_EQ(base64_decode(base64_encode(binary)), binary);
    for (const char *bad : {"Zm9v!", "Z", "Zm9vY"}) {
        try {
            base64_decode(bad);
            ADD_FAILURE() << "accepted " << bad;
        } catch (const Error &e) {
            EXPECT_EQ(e.code(), ErrorCode::MalformedRecord);
        }
    }
}

TEST(Letterbox, GeometryKeepsAspectRatio) {
    auto b = letterbox_geometry(200, 100, 96, 96);
    EXPECT_EQ(b.height, 96);
    EXPECT_EQ(b.width, 48);
    EXPECT_EQ(b.top, 0);
    EXPECT_EQ(b.left, 24);
    b = letterbox_geometry(96, 96, 96, 96);
    EXPECT_EQ(b.height, 96);
    EXPECT_EQ(b.top, 0);
    EXPECT_EQ(b.left, 0);
    b = letterbox_geometry(10, 1000, 96, 96);
    EXPECT_EQ(b.width, 96);
    EXPECT_GE(b.height, 1);
    const auto canvas = letterbox_image(Image8(3, 200, 100, 255), letterbox_geometry(200, 100, 96, 96), 96, 96);
    EXPECT_EQ(canvas.sizes(), torch::IntArrayRef({3, 96, 96}));
    EXPECT_EQ(canvas.slice(2, 0, 24).abs().max().item<float>(), 0.0f);
    EXPECT_EQ(canvas.slice(2, 24, 72).min().item<float>(), 1.0f);
}

TEST_F(ServiceTest, AnswersServiceUnavailableWhileLoading) {
    ServiceConfig cfg;
    SegmentService service(cfg);
    SegmentRequest r;
    r.expression = "the lesion";
    EXPECT_EQ(service.segment(r).status, 503);
    EXPECT_EQ(error_code(service.segment(r)), "model_loading");
    EXPECT_EQ(parse(service.health())["status"], "loading");
}

TEST_F(ServiceTest, ReportsAFailedLoad) {
    ServiceConfig cfg;
    cfg.checkpoint = dir_ / "does_not_exist.pt";
    SegmentService service(cfg);
    service.start_loading();
    service.wait_ready();
    SegmentRequest r;
    r.expression = "the lesion";
    r.image_bytes = encode_png(gradient_image(96, 96));
    const auto reply = service.segment(r);
    EXPECT_EQ(reply.status, 503);
    EXPECT_EQ(error_code(reply), "model_unavailable");
    EXPECT_EQ(parse(service.health())["status"], "error");
}

TEST_F(ServiceTest, LoadsACheckpointInTheBackground) {
    auto model = toy_model(5);
    const auto path = dir_ / "toy.pt";
    save_checkpoint(path, model);
    ServiceConfig cfg;
    cfg.checkpoint = path;
    SegmentService service(cfg);
    service.start_loading();
    service.wait_ready();
    const auto health = parse(service.health());
    EXPECT_EQ(health["status"], "ok");
    EXPECT_EQ(health["config_hash"], ModelConfig::toy().hash());
    EXPECT_EQ(service.segment(image_request(gradient_image(96, 96), "the lesion on the left")).status, 200);
}

TEST_F(ServiceTest, ValidatesRequests) {
    auto &service = ready_service();
    SegmentRequest r = image_request(gradient_image(96, 96), "the lesion");
    r.expression.reset();
    EXPECT_EQ(error_code(service.segment(r)), "missing_expression");
    r.expression = "   ";
    EXPECT_EQ(error_code(service.segment(r)), "empty_expression");
    r.expression = "the lesion";
    for (double t : {0.0, 1.0, -0.5, std::nan("")}) {
        r.threshold = t;
        EXPECT_EQ(error_code(service.segment(r)), "bad_threshold") << t;
    }
    r.threshold = 0.5;
    r.image_bytes.clear();
    EXPECT_EQ(error_code(service.segment(r)), "missing_image");
    r.image_bytes = "definitely not an image";
    EXPECT_EQ(error_code(service.segment(r)), "undecodable_image");
    r.image_bytes.clear();
    r.sample = "no_such_sample";
    EXPECT_EQ(error_code(service.segment(r)), "unknown_sample");
    for (const auto &reply : {service.segment(r), service.segment_json("{not json"), service.segment_json("[1, 2]")}) {
        EXPECT_EQ(reply.status, 400);
        EXPECT_EQ(parse(reply)["api_version"], kApiVersion);
    }
    EXPECT_EQ(error_code(service.segment_json("{not json")), "malformed_request");
    EXPECT_EQ(error_code(service.segment_json(R"({"image": "%%%", "expression": "x"})")), "undecodable_image");
}

TEST_F(ServiceTest, RejectsOversizedImages) {
    auto &service = ready_service(64);
    const auto reply = service.segment(image_request(gradient_image(65, 40), "the lesion"));
    EXPECT_EQ(reply.status, 413);
    EXPECT_EQ(error_code(reply), "image_too_large");
}

TEST_F(ServiceTest, MaskMatchesDirectPredictionAtModelSize) {
    auto &service = ready_service();
    const auto &s = samples_[0];
    const auto reply = service.segment(image_request(s.image, s.expression));
    ASSERT_EQ(reply.status, 200) << reply.body;
    const auto j = parse(reply);
    EXPECT_EQ(j["api_version"], kApiVersion);
    EXPECT_EQ(j["height"], 96);
    EXPECT_EQ(j["width"], 96);
    EXPECT_EQ(j["model_id"], "toy-test");
    EXPECT_EQ(j["expression"], s.expression);
    EXPECT_EQ(j["mask_rle"]["order"], "row-major");
    EXPECT_TRUE(j.contains("latency_ms"));
    EXPECT_FALSE(j.contains("mask_png"));

    auto model = toy_model();
    const auto direct = predict(model, image_to_tensor(s.image).unsqueeze(0), {s.expression});
    const auto want = mask_from_tensor(direct[0]);
    EXPECT_EQ(decode_reply_mask(j), want.data);
}

TEST_F(ServiceTest, RepeatedRequestsGiveIdenticalMasks) {
    auto &service = ready_service();
    auto r = image_request(gradient_image(96, 96), "the nodule in the lower left part");
    r.threshold = 0.3;
    const auto a = parse(service.segment(r));
    const auto b = parse(service.segment(r));
    EXPECT_EQ(a["mask_rle"], b["mask_rle"]);
    EXPECT_EQ(a["threshold"], 0.3);
}

TEST_F(ServiceTest, NonSquareImagesMapBackToTheirOwnSize) {
    auto &service = ready_service();
    auto r = image_request(gradient_image(150, 60), "the lesion");
    r.return_raster = true;
    r.threshold = 0.2;
    const auto reply = service.segment(r);
    ASSERT_EQ(reply.status, 200) << reply.body;
    const auto j = parse(reply);
    EXPECT_EQ(j["height"], 150);
    EXPECT_EQ(j["width"], 60);
    const auto mask = decode_reply_mask(j);
    EXPECT_EQ(mask.size(), 150u * 60u);
    const auto raster = mask_from_display(decode_image(base64_decode(j["mask_png"].get<std::string>()), 1));
    EXPECT_EQ(raster.height, 150);
    EXPECT_EQ(raster.width, 60);
    EXPECT_EQ(raster.data, mask);
}

TEST_F(ServiceTest, JsonBodyMatchesStructuredRequest) {
    auto &service = ready_service();
    const auto img = gradient_image(96, 96);
    nlohmann::json body{{"image", "data:image/png;base64," + base64_encode(encode_png(img))},
                        {"expression", "the mass on the right side"},
                        {"threshold", 0.4}};
    const auto a = parse(service.segment_json(body.dump()));
    auto r = image_request(img, "the mass on the right side");
    r.threshold = 0.4;
    const auto b = parse(service.segment(r));
    EXPECT_EQ(a["mask_rle"], b["mask_rle"]);
}

TEST_F(ServiceTest, ListsAndServesBundledSamples) {
    auto &service = ready_service();
    const auto list = parse(service.samples());
    ASSERT_EQ(list["samples"].size(), 3u);
    const auto &first = list["samples"][0];
    EXPECT_EQ(first["expression"], samples_[0].expression);
    const auto gt = rle_decode(first["gt_rle"]["counts"].get<std::vector<std::uint32_t>>(), 96 * 96);
    EXPECT_EQ(gt, samples_[0].mask.data);

    const auto name = first["name"].get<std::string>();
    const auto png = service.sample_image(name);
    EXPECT_EQ(png.status, 200);
    EXPECT_EQ(png.content_type, "image/png");
    EXPECT_EQ(decode_image(png.body, 3), samples_[0].image);
    EXPECT_EQ(service.sample_image("missing").status, 404);

    SegmentRequest r;
    r.sample = name;
    r.expression = samples_[0].expression;
    const auto by_name = parse(service.segment(r));
    const auto by_upload = parse(service.segment(image_request(samples_[0].image, samples_[0].expression)));
    EXPECT_EQ(by_name["mask_rle"], by_upload["mask_rle"]);
}

TEST_F(ServiceTest, HttpRoutes) {
    auto &service = ready_service();
    HttpServer server(service, "127.0.0.1", 0);
    server.start();
    httplib::Client client("127.0.0.1", server.port());

    auto health = client.Get("/health");
    ASSERT_TRUE(health);
    EXPECT_EQ(health->status, 200);
    EXPECT_EQ(nlohmann::json::parse(health->body)["status"], "ok");
    EXPECT_EQ(health->get_header_value("Access-Control-Allow-Origin"), "*");

    auto preflight = client.Options("/segment");
    ASSERT_TRUE(preflight);
    EXPECT_EQ(preflight->status, 204);

    const auto img = gradient_image(96, 96);
    nlohmann::json body{{"image", base64_encode(encode_png(img))}, {"expression", "the lesion"}};
    auto seg = client.Post("/segment", body.dump(), "application/json");
    ASSERT_TRUE(seg);
    EXPECT_EQ(seg->status, 200);
    const auto via_http = nlohmann::json::parse(seg->body);

    httplib::MultipartFormDataItems form = {{"image", encode_png(img), "x.png", "image/png"},
                                            {"expression", "the lesion", "", ""}};
    auto multipart = client.Post("/segment", form);
    ASSERT_TRUE(multipart);
    EXPECT_EQ(multipart->status, 200);
    EXPECT_EQ(nlohmann::json::parse(multipart->body)["mask_rle"], via_http["mask_rle"]);

    auto bad = client.Post("/segment", R"({"expression": ""})", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);

    auto listing = client.Get("/samples");
    ASSERT_TRUE(listing);
    EXPECT_EQ(nlohmann::json::parse(listing->body)["samples"].size(), 3u);
    server.stop();
}
