// Standalone embedding-service double for local extract runs:
//   visaff-mock-embed --port 8808 --dim 4096

#include "mock_embed_server.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

namespace {
volatile std::sig_atomic_t g_stop = 0;
void handle_signal(int) { g_stop = 1; }
} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mock frozen-VLM embedding service"};
    int port = 8808;
    std::uint32_t dim = 64;
    int fail_first = 0;
    app.add_option("--port", port, "Listen port")->capture_default_str();
    app.add_option("--dim", dim, "Embedding dimension")->capture_default_str();
    app.add_option("--fail-first", fail_first, "Respond 503 to the first N requests")
        ->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    visaff::testing::MockEmbedServer::Options options;
    options.dim = dim;
    options.fail_first_n = fail_first;
    visaff::testing::MockEmbedServer server(options);

    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);

    server.start_on(port);
    std::cout << "listening on http://127.0.0.1:" << port << "/embed (dim " << dim << ")\n";
    while (!g_stop) {
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
    server.stop();
    return 0;
}
