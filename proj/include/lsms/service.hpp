#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lsms/image_io.hpp"
#include "lsms/model.hpp"

namespace lsms {

inline constexpr const char *kApiVersion = "1";
inline constexpr const char *kCheckpointEnv = "LSMS_CHECKPOINT";

std::string base64_encode(std::string_view bytes);
// Accepts an optional "data:...;base64," prefix. Throws MalformedRecord.
std::string base64_decode(std::string_view text);

// Letterbox geometry: the image is scaled by `scale` to (height, width) and
// placed at (top, left) inside the model canvas.
struct Letterbox {
    int top = 0;
    int left = 0;
    int height = 0;
    int width = 0;
};

Letterbox letterbox_geometry(int image_height, int image_width, int canvas_height, int canvas_width);

// Model input [3, canvas_h, canvas_w] with the resized image pasted in and
// zero padding elsewhere.
torch::Tensor letterbox_image(const Image8 &image, const Letterbox &box, int canvas_height, int canvas_width);

struct SegmentRequest {
    std::string image_bytes;  // encoded raster; empty when `sample` is used
    std::string sample;       // name of a bundled sample
    std::optional<std::string> expression;
    double threshold = 0.5;
    bool return_raster = false;
};

// Parses the JSON body {"image": base64, "expression", "threshold",
// "return_raster", "sample"}. Field validation happens in the service.
SegmentRequest parse_segment_request(const nlohmann::json &body);

struct HttpReply {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

struct ServiceConfig {
    std::filesystem::path checkpoint;
    std::filesystem::path samples_dir;  // dataset split layout or a folder of PNGs
    int max_side = 2048;
};

/// Inference service core, independent of the HTTP layer. The model is
/// loaded once on a background thread; until then /segment answers 503.
/// Requests never mutate shared state after the load completes.
class SegmentService {
public:
    explicit SegmentService(ServiceConfig cfg);
    ~SegmentService();

    void start_loading();
    // Blocks until loading has finished (successfully or not).
    void wait_ready();
    bool ready() const { return ready_.load(); }
    // Serves an already constructed model (tests).
    void set_model(LsmsModel model, std::string model_id);

    HttpReply segment(const SegmentRequest &request) const;
    HttpReply segment_json(const std::string &body) const;
    HttpReply health() const;
    HttpReply samples() const;
    HttpReply sample_image(const std::string &name) const;

private:
    struct Sample {
        std::string name;
        std::filesystem::path image;
        std::filesystem::path mask;
        std::string expression;
    };

    std::vector<Sample> list_samples() const;
    std::optional<Sample> find_sample(const std::string &name) const;

    ServiceConfig cfg_;
    LsmsModel model_{nullptr};
    std::string model_id_;
    std::string config_hash_;
    std::string load_error_;
    std::atomic<bool> ready_{false};
    std::atomic<bool> loading_{false};
    std::thread loader_;
    std::chrono::steady_clock::time_point started_;
};

HttpReply error_reply(int status, std::string_view code, const std::string &message);

// HTTP API over a SegmentService. Port 0 binds any free port.
class HttpServer {
public:
    HttpServer(SegmentService &service, const std::string &host, int port);
    ~HttpServer();

    int port() const;
    // Serves on a background thread until stop().
    void start();
    // Serves on the calling thread.
    void run();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Blocking HTTP server on host:port.
void run_server(SegmentService &service, const std::string &host, int port);

}  // namespace lsms
