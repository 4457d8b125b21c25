#include "lsms/service.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include <boost/beast/core/detail/base64.hpp>
#include <httplib.h>

#include "lsms/decoder.hpp"
#include "lsms/errors.hpp"
#include "lsms/rle.hpp"

namespace lsms {

namespace b64 = boost::beast::detail::base64;

std::string base64_encode(std::string_view bytes) {
    std::string out(b64::encoded_size(bytes.size()), '\0');
    out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
    return out;
}

std::string base64_decode(std::string_view text) {
    if (text.substr(0, 5) == "data:") {
        const auto comma = text.find(',');
        if (comma == std::string_view::npos) throw Error(ErrorCode::MalformedRecord, "data URI without payload");
        text.remove_prefix(comma + 1);
    }
    std::string clean;
    clean.reserve(text.size());
    for (char c : text) {
        if (!std::isspace(static_cast<unsigned char>(c))) clean += c;
    }
    std::string out(b64::decoded_size(clean.size()), '\0');
    const auto [written, read] = b64::decode(out.data(), clean.data(), clean.size());
    // The decoder stops at the first character outside the alphabet; only
    // trailing '=' padding may remain.
    // A single leftover symbol cannot encode a byte.
    if (clean.find_first_not_of('=', read) != std::string::npos || read % 4 == 1) {
        throw Error(ErrorCode::MalformedRecord, "invalid base64 payload");
    }
    out.resize(written);
    return out;
}

Letterbox letterbox_geometry(int image_height, int image_width, int canvas_height, int canvas_width) {
    const double scale = std::min(static_cast<double>(canvas_height) / image_height,
                                  static_cast<double>(canvas_width) / image_width);
    Letterbox box;
    box.height = std::clamp(static_cast<int>(std::lround(image_height * scale)), 1, canvas_height);
    box.width = std::clamp(static_cast<int>(std::lround(image_width * scale)), 1, canvas_width);
    box.top = (canvas_height - box.height) / 2;
    box.left = (canvas_width - box.width) / 2;
    return box;
}

torch::Tensor letterbox_image(const Image8 &image, const Letterbox &box, int canvas_height, int canvas_width) {
    auto canvas = torch::zeros({3, canvas_height, canvas_width});
    const auto resized = image_to_tensor(resize(image, box.height, box.width, Interpolation::Bilinear));
    canvas.slice(1, box.top, box.top + box.height).slice(2, box.left, box.left + box.width).copy_(resized);
    return canvas;
}

SegmentRequest parse_segment_request(const nlohmann::json &body) {
    SegmentRequest r;
    if (!body.is_object()) throw Error(ErrorCode::MalformedRecord, "request body must be a JSON object");
    if (body.contains("expression") && body["expression"].is_string()) r.expression = body["expression"].get<std::string>();
    if (body.contains("image")) {
        if (!body["image"].is_string()) throw Error(ErrorCode::MalformedRecord, "image must be a base64 string");
        r.image_bytes = base64_decode(body["image"].get<std::string>());
    }
    r.sample = body.value("sample", "");
    r.threshold = body.value("threshold", 0.5);
    r.return_raster = body.value("return_raster", false);
    return r;
}

HttpReply error_reply(int status, std::string_view code, const std::string &message) {
    nlohmann::json j{{"api_version", kApiVersion}, {"error", {{"code", code}, {"message", message}}}};
    return {status, "application/json", j.dump()};
}

SegmentService::SegmentService(ServiceConfig cfg) : cfg_(std::move(cfg)), started_(std::chrono::steady_clock::now()) {}

SegmentService::~SegmentService() {
    if (loader_.joinable()) loader_.join();
}

void SegmentService::start_loading() {
    if (loading_.exchange(true)) return;
    loader_ = std::thread([this] {
        try {
            auto loaded = load_checkpoint(cfg_.checkpoint);
            model_ = loaded.model;
            model_id_ = loaded.id;
            config_hash_ = model_->config().hash();
        } catch (const std::exception &e) {
            load_error_ = e.what();
        }
        ready_.store(true);
    });
}

void SegmentService::wait_ready() {
    if (loader_.joinable()) loader_.join();
}

void SegmentService::set_model(LsmsModel model, std::string model_id) {
    model_ = std::move(model);
    model_->eval();
    model_id_ = std::move(model_id);
    config_hash_ = model_->config().hash();
    ready_.store(true);
}

HttpReply SegmentService::segment_json(const std::string &body) const {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return error_reply(400, "malformed_request", "body is not a JSON object");
    try {
        return segment(parse_segment_request(j));
    } catch (const Error &e) {
        return error_reply(400, "undecodable_image", e.what());
    } catch (const nlohmann::json::exception &e) {
        return error_reply(400, "malformed_request", e.what());
    }
}

HttpReply SegmentService::segment(const SegmentRequest &request) const {
    const auto t0 = std::chrono::steady_clock::now();
    if (!ready_.load()) return error_reply(503, "model_loading", "the model is still loading");
    if (!model_) return error_reply(503, "model_unavailable", "model failed to load: " + load_error_);

    if (!request.expression) return error_reply(400, "missing_expression", "expression is required");
    const auto &expression = *request.expression;
    if (expression.find_first_not_of(" \t\r\n") == std::string::npos) {
        return error_reply(400, "empty_expression", "expression is empty");
    }
    if (!(request.threshold > 0.0 && request.threshold < 1.0)) {
        return error_reply(400, "bad_threshold", "threshold must lie in (0, 1)");
    }

    Image8 image;
    try {
        if (!request.sample.empty()) {
            const auto s = find_sample(request.sample);
            if (!s) return error_reply(400, "unknown_sample", "no bundled sample named " + request.sample);
            image = read_image(s->image, 3);
        } else {
            if (request.image_bytes.empty()) return error_reply(400, "missing_image", "image is required");
            image = decode_image(request.image_bytes, 3);
        }
    } catch (const Error &e) {
        return error_reply(400, "undecodable_image", e.what());
    }
    if (image.height > cfg_.max_side || image.width > cfg_.max_side) {
        return error_reply(413, "image_too_large",
                           "image side exceeds " + std::to_string(cfg_.max_side) + " pixels");
    }

    const auto &mcfg = model_->config();
    const auto box = letterbox_geometry(image.height, image.width, mcfg.image_height, mcfg.image_width);
    torch::Tensor mask;
    try {
        torch::NoGradGuard guard;
        auto model = model_;  // shared handle; forward is non-const but does not mutate in eval mode
        const auto input = letterbox_image(image, box, mcfg.image_height, mcfg.image_width).unsqueeze(0);
        const auto text = model->encode_text(model->tokenize(std::vector<std::string>{expression}));
        auto logits = model->forward(input, text);
        logits = logits.slice(2, box.top, box.top + box.height).slice(3, box.left, box.left + box.width);
        logits = bilinear_resize(logits.contiguous(), image.height, image.width);
        mask = predict_mask(logits, request.threshold)[0].to(torch::kUInt8).contiguous();
    } catch (const Error &e) {
        return error_reply(400, "bad_request", e.what());
    }

    std::vector<std::uint8_t> pixels(mask.data_ptr<std::uint8_t>(), mask.data_ptr<std::uint8_t>() + mask.numel());
    nlohmann::json j{{"api_version", kApiVersion},
                     {"expression", expression},
                     {"height", image.height},
                     {"width", image.width},
                     {"mask_rle", {{"order", "row-major"}, {"first", 0}, {"counts", rle_encode(pixels)}}},
                     {"model_id", model_id_},
                     {"config_hash", config_hash_},
                     {"threshold", request.threshold}};
    if (request.return_raster) {
        Image8 raster(1, image.height, image.width);
        raster.data = pixels;
        j["mask_png"] = base64_encode(encode_png(mask_to_display(raster)));
    }
    j["latency_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return {200, "application/json", j.dump()};
}

HttpReply SegmentService::health() const {
    const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    std::string status = "loading";
    if (ready_.load()) status = model_ ? "ok" : "error";
    nlohmann::json j{{"api_version", kApiVersion}, {"status", status}, {"model_id", model_id_},
                     {"config_hash", config_hash_}, {"uptime_s", uptime}};
    if (!load_error_.empty()) j["error"] = load_error_;
    return {200, "application/json", j.dump()};
}

std::vector<SegmentService::Sample> SegmentService::list_samples() const {
    std::vector<Sample> out;
    if (cfg_.samples_dir.empty() || !std::filesystem::is_directory(cfg_.samples_dir)) return out;
    const auto annotations = cfg_.samples_dir / "annotations.jsonl";
    if (std::filesystem::exists(annotations)) {
        std::ifstream in(annotations);
        std::string line;
        while (std::getline(in, line)) {
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("image")) continue;
            Sample s;
            s.image = cfg_.samples_dir / j["image"].get<std::string>();
            s.name = s.image.stem().string();
            if (j.contains("mask")) s.mask = cfg_.samples_dir / j["mask"].get<std::string>();
            s.expression = j.value("expression", "");
            out.push_back(std::move(s));
        }
        return out;
    }
    for (const auto &entry : std::filesystem::directory_iterator(cfg_.samples_dir)) {
        if (entry.path().extension() == ".png") out.push_back({entry.path().stem().string(), entry.path(), {}, {}});
    }
    std::sort(out.begin(), out.end(), [](const Sample &a, const Sample &b) { return a.name < b.name; });
    return out;
}

std::optional<SegmentService::Sample> SegmentService::find_sample(const std::string &name) const {
    for (auto &s : list_samples()) {
        if (s.name == name) return s;
    }
    return std::nullopt;
}

HttpReply SegmentService::samples() const {
    nlohmann::json items = nlohmann::json::array();
    for (const auto &s : list_samples()) {
        nlohmann::json item{{"name", s.name}, {"url", "/samples/" + s.name}};
        if (!s.expression.empty()) item["expression"] = s.expression;
        if (!s.mask.empty() && std::filesystem::exists(s.mask)) {
            try {
                const auto m = mask_from_display(read_image(s.mask, 1));
                item["height"] = m.height;
                item["width"] = m.width;
                item["gt_rle"] = {{"order", "row-major"}, {"first", 0}, {"counts", rle_encode(m.data)}};
            } catch (const Error &) {
            }
        }
        items.push_back(std::move(item));
    }
    return {200, "application/json", nlohmann::json{{"api_version", kApiVersion}, {"samples", items}}.dump()};
}

HttpReply SegmentService::sample_image(const std::string &name) const {
    const auto s = find_sample(name);
    if (!s) return error_reply(404, "unknown_sample", "no bundled sample named " + name);
    std::ifstream in(s->image, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return {200, "image/png", bytes};
}

namespace {

void install_routes(httplib::Server &server, SegmentService &service) {
    auto send = [](httplib::Response &res, const HttpReply &reply) {
        res.status = reply.status;
        res.set_content(reply.body, reply.content_type);
        res.set_header("Access-Control-Allow-Origin", "*");
    };
    server.Post("/segment", [&](const httplib::Request &req, httplib::Response &res) {
        if (req.is_multipart_form_data()) {
            SegmentRequest r;
            if (req.has_file("image")) r.image_bytes = req.get_file_value("image").content;
            if (req.has_file("expression")) r.expression = req.get_file_value("expression").content;
            if (req.has_file("sample")) r.sample = req.get_file_value("sample").content;
            if (req.has_file("threshold")) {
                try {
                    r.threshold = std::stod(req.get_file_value("threshold").content);
                } catch (const std::exception &) {
                    r.threshold = -1.0;
                }
            }
            send(res, service.segment(r));
            return;
        }
        send(res, service.segment_json(req.body));
    });
    server.Options("/segment", [](const httplib::Request &, httplib::Response &res) {
        res.set_header("Access-Control-Allow-Origin", "*");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.set_header("Access-Control-Allow-Methods", "POST, OPTIONS");
        res.status = 204;
    });
    server.Get("/health", [&](const httplib::Request &, httplib::Response &res) { send(res, service.health()); });
    server.Get("/samples", [&](const httplib::Request &, httplib::Response &res) { send(res, service.samples()); });
    server.Get(R"(/samples/([A-Za-z0-9_.-]+))", [&](const httplib::Request &req, httplib::Response &res) {
        send(res, service.sample_image(req.matches[1]));
    });
}

}  // namespace

struct HttpServer::Impl {
    httplib::Server server;
    std::thread thread;
    int port = 0;
};

HttpServer::HttpServer(SegmentService &service, const std::string &host, int port) : impl_(std::make_unique<Impl>()) {
    install_routes(impl_->server, service);
    impl_->port = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (impl_->port < 0) throw Error(ErrorCode::UsageError, "cannot listen on " + host + ":" + std::to_string(port));
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::port() const { return impl_->port; }

void HttpServer::start() {
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

void run_server(SegmentService &service, const std::string &host, int port) {
    HttpServer server(service, host, port);
    std::cerr << "listening on " << host << ":" << server.port() << "\n";
    server.run();
}

}  // namespace lsms
