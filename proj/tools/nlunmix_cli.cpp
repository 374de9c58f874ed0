#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <nlunmix/nlunmix.hpp>

using namespace nlunmix;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitRuntime = 2;

struct Options {
    // shared
    std::string out;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    // generate
    Index width = 50;
    Index height = 50;
    std::string model = "blmm";
    std::string snr = "20";
    double smoothness = SceneSpec{}.smoothness;
    Index synthetic = 0;
    Index bands = 224;
    // unmix / sweep / evaluate
    std::string image;
    std::string endmembers;
    std::string algorithm = "bmua-n";
    double mu = 0.01;
    std::string kernel = "centered";
    Index kmin = 0;
    Index kmax = 0;
    double hom_eps = 0.1;
    double sigma_psi2 = -1.0;
    double compactness = -1.0;
    std::string truth;
    std::string estimate;
    std::string psi;
    std::vector<double> grid;
    // replay
    std::string manifest;
};

// Keeps the stage name attached to anything thrown inside fn.
template <class Fn>
auto staged(const std::string& stage, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

double parse_snr(const std::string& s) {
    std::string v = s;
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (v == "inf" || v == "infinity" || v == "noiseless") return std::numeric_limits<double>::infinity();
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        throw InvalidArgument("--snr: cannot parse '" + s + "'");
    }
    if (used != v.size() || std::isnan(d)) throw InvalidArgument("--snr: cannot parse '" + s + "'");
    return d;
}

KernelConfig make_kernel(const std::string& name, Index p) {
    if (name == "centered") return KernelConfig::centered(p);
    if (name == "plain") return KernelConfig{};
    throw InvalidArgument("--kernel must be 'centered' or 'plain'");
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
}

json read_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + path + ": " + e.what());
    }
}

// Binary 8-bit grayscale image, abundance 0 maps to black and 1 to white.
void write_pgm(const fs::path& path, const Vector& values, Index width, Index height) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P5\n" << width << ' ' << height << "\n255\n";
    for (Index i = 0; i < width * height; ++i) {
        const double v = std::clamp(values(i), 0.0, 1.0);
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
    }
}

void write_abundance_maps(const fs::path& dir, const Matrix& a, Index width, Index height) {
    for (Index k = 0; k < a.rows(); ++k)
        write_pgm(dir / ("abundance_" + std::to_string(k) + ".pgm"), a.row(k).transpose(), width, height);
}

fs::path prepare_out(const std::string& out) {
    if (out.empty()) throw InvalidArgument("--out is required");
    fs::create_directories(out);
    return fs::path(out);
}

class Manifest {
public:
    Manifest(std::string subcommand, std::vector<std::string> argv) {
        doc_["subcommand"] = std::move(subcommand);
        doc_["argv"] = std::move(argv);
        doc_["inputs"] = json::object();
        doc_["config"] = json::object();
        doc_["timings"] = json::array();
        doc_["status"] = "running";
    }
    json& operator[](const char* key) { return doc_[key]; }
    void input(const std::string& key, const std::string& path) {
        if (!path.empty()) doc_["inputs"][key] = path;
    }
    // Runs fn under a stage tag and records its wall-clock time.
    template <class Fn>
    auto stage(const std::string& name, Fn&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(fn())>) {
            staged(name, fn);
            record(name, t0);
        } else {
            auto r = staged(name, fn);
            record(name, t0);
            return r;
        }
    }
    void timing(const std::string& name, double seconds) { doc_["timings"].push_back({{"stage", name}, {"seconds", seconds}}); }
    void write(const fs::path& dir) const { write_text(dir / "manifest.json", doc_.dump(2) + "\n"); }

private:
    void record(const std::string& name, std::chrono::steady_clock::time_point t0) {
        timing(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    json doc_;
};

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_generate(const Options& o, Manifest& man) {
    if (o.endmembers.empty() == (o.synthetic == 0))
        throw InvalidArgument("generate needs exactly one of --endmembers or --synthetic-endmembers");
    const fs::path out = prepare_out(o.out);
    SceneSpec spec;
    spec.width = o.width;
    spec.height = o.height;
    spec.model = parse_mixing_model(o.model);
    spec.snr_db = parse_snr(o.snr);
    spec.seed = o.seed;
    spec.smoothness = o.smoothness;

    const EndmemberMatrix m = man.stage("endmembers", [&] {
        return o.endmembers.empty() ? synthetic_endmembers(o.synthetic, o.bands, o.seed) : load_endmembers(o.endmembers);
    });
    spec.endmembers = m.count();
    man.input("endmembers", o.endmembers);
    man["config"] = {{"width", spec.width},         {"height", spec.height},
                     {"endmembers", spec.endmembers}, {"bands", m.bands()},
                     {"model", to_string(spec.model)}, {"snr", o.snr},
                     {"smoothness", spec.smoothness}, {"synthetic_endmembers", o.synthetic}};

    const Scene scene = man.stage("simulate", [&] { return generate_scene(spec, m); });
    man.stage("write", [&] {
        save_image((out / "image.cube").string(), scene.image);
        save_endmembers((out / "endmembers.csv").string(), scene.endmembers);
        write_csv_matrix((out / "abundances.csv").string(), scene.abundances.values);
        json sj = {{"width", spec.width},
                   {"height", spec.height},
                   {"endmembers", spec.endmembers},
                   {"bands", m.bands()},
                   {"model", to_string(spec.model)},
                   {"snr", o.snr},
                   {"seed", spec.seed},
                   {"smoothness", spec.smoothness},
                   {"pnmm_exponent", spec.pnmm_exponent},
                   {"noise_variance", m.bands() > 0 ? scene.noise.trace() / static_cast<double>(m.bands()) : 0.0}};
        write_text(out / "spec.json", sj.dump(2) + "\n");
        write_abundance_maps(out, scene.abundances.values, spec.width, spec.height);
    });
    std::cout << "wrote " << spec.width << "x" << spec.height << " " << to_string(spec.model) << " scene with "
              << spec.endmembers << " endmembers to " << out.string() << '\n';
}

void cmd_unmix(const Options& o, Manifest& man) {
    const fs::path out = prepare_out(o.out);
    man.input("image", o.image);
    man.input("endmembers", o.endmembers);
    const SpectralImage img = man.stage("load", [&] {
        if (o.image.empty() || o.endmembers.empty()) throw InvalidArgument("unmix needs --image and --endmembers");
        return load_image(o.image);
    });
    const EndmemberMatrix m = man.stage("load", [&] { return load_endmembers(o.endmembers); });

    json cfg = {{"algorithm", o.algorithm}, {"threads", o.threads}};
    UnmixResult r;
    if (o.algorithm == "fcls") {
        r = man.stage("fcls", [&] { return fcls(img, m, o.threads); });
    } else if (o.algorithm == "khype") {
        const KernelConfig kc = staged("validate", [&] { return make_kernel(o.kernel, m.count()); });
        cfg["mu"] = o.mu;
        cfg["kernel"] = o.kernel;
        r = man.stage("khype", [&] { return khype(img, m, o.mu, kc, o.threads); });
    } else if (o.algorithm == "bmua-n") {
        BmuaConfig bc;
        bc.kernel = staged("validate", [&] { return make_kernel(o.kernel, m.count()); });
        bc.superpixels.k_min = o.kmin;
        bc.superpixels.k_max = o.kmax;
        bc.superpixels.eps = o.hom_eps;
        bc.superpixels.slic.compactness = o.compactness;
        bc.sigma_psi2 = o.sigma_psi2;
        bc.threads = o.threads;
        cfg["kernel"] = o.kernel;
        cfg["kmin"] = o.kmin;
        cfg["kmax"] = o.kmax;
        cfg["hom_eps"] = o.hom_eps;
        cfg["sigma_psi2"] = o.sigma_psi2;
        cfg["compactness"] = o.compactness;
        r = bmua_n(img, m, bc);
        for (const auto& [stage, seconds] : r.timings) man.timing(stage, seconds);
    } else {
        throw StageError("validate", "unknown algorithm '" + o.algorithm + "' (expected fcls, khype or bmua-n)");
    }
    man["config"] = cfg;

    const bool has_psi = o.algorithm != "fcls";
    man.stage("write", [&] {
        write_csv_matrix((out / "abundances.csv").string(), r.abundances.values);
        std::string report = "algorithm = " + o.algorithm + "\n";
        if (has_psi) {
            save_cube((out / "psi.cube").string(), Cube{img.width(), img.height(), r.nonlinear.values});
            report += "psi = psi.cube\n";
        } else {
            std::error_code ec;
            fs::remove(out / "psi.cube", ec);
            report += "psi = absent (linear model)\n";
        }
        report += r.diagnostics.report();
        write_text(out / "diagnostics.txt", report);
        write_abundance_maps(out, r.abundances.values, img.width(), img.height());
    });
    man["outputs"] = {{"psi", has_psi}};
    json diag = json::object();
    for (const auto& [k, v] : r.diagnostics.values) diag[k] = v;
    man["diagnostics"] = diag;
    man["warnings"] = r.diagnostics.warnings;
    std::cout << "unmixed " << img.pixels() << " pixels with " << o.algorithm << " into " << out.string() << '\n';
}

void cmd_evaluate(const Options& o, Manifest& man) {
    man.input("truth", o.truth);
    man.input("estimate", o.estimate);
    man.input("image", o.image);
    man.input("endmembers", o.endmembers);
    man.input("psi", o.psi);
    const Matrix truth = man.stage("load", [&] { return read_csv_matrix(o.truth); });
    const Matrix est = man.stage("load", [&] { return read_csv_matrix(o.estimate); });
    std::string text, csv;
    man.stage("evaluate", [&] {
        if (truth.rows() != est.rows() || truth.cols() != est.cols())
            throw DimensionMismatch("truth is " + std::to_string(truth.rows()) + "x" + std::to_string(truth.cols()) +
                                    " but estimate is " + std::to_string(est.rows()) + "x" +
                                    std::to_string(est.cols()));
        if (o.image.empty() != o.endmembers.empty())
            throw InvalidArgument("--image and --endmembers must be given together");
        if (o.image.empty()) {
            std::ostringstream os;
            os.precision(10);
            os << "rmse_a = " << rmse(truth, est) << '\n';
            text = os.str();
            csv = "rmse_a\n" + os.str().substr(9);
            return;
        }
        const SpectralImage img = load_image(o.image);
        const EndmemberMatrix m = load_endmembers(o.endmembers);
        Matrix y_hat = m.matrix() * est;
        if (!o.psi.empty()) {
            const Cube psi = load_cube(o.psi);
            if (psi.data.rows() != y_hat.rows() || psi.data.cols() != y_hat.cols())
                throw DimensionMismatch("Psi cube does not match the image");
            y_hat += psi.data;
        }
        if (y_hat.rows() != img.bands() || y_hat.cols() != img.pixels())
            throw DimensionMismatch("reconstruction does not match the image");
        const EvalReport rep = evaluate(truth, est, img.data(), y_hat);
        text = rep.to_text();
        csv = EvalReport::csv_header() + "\n" + rep.csv_row() + "\n";
    });
    std::cout << text;
    if (!o.out.empty()) {
        const fs::path out = prepare_out(o.out);
        write_text(out / "report.txt", text);
        write_text(out / "report.csv", csv);
    }
}

void cmd_sweep(const Options& o, Manifest& man) {
    man.input("image", o.image);
    man.input("endmembers", o.endmembers);
    man.input("truth", o.truth);
    const std::vector<double> grid = o.grid.empty() ? khype_default_grid() : o.grid;
    const SpectralImage img = man.stage("load", [&] { return load_image(o.image); });
    const EndmemberMatrix m = man.stage("load", [&] { return load_endmembers(o.endmembers); });
    const Matrix truth = man.stage("load", [&] { return read_csv_matrix(o.truth); });
    const KernelConfig kc = staged("validate", [&] { return make_kernel(o.kernel, m.count()); });
    man["config"] = {{"grid", grid}, {"kernel", o.kernel}, {"threads", o.threads}};
    const KhypeSweep sweep = man.stage("sweep", [&] { return khype_grid_search(img, m, grid, truth, kc, o.threads); });

    std::ostringstream csv;
    csv.precision(std::numeric_limits<double>::max_digits10);
    csv << "mu,rmse_a\n";
    for (const auto& [mu, err] : sweep.table) csv << mu << ',' << err << '\n';
    std::cout << csv.str() << "best_mu = " << sweep.best_mu() << "\nbest_rmse_a = " << sweep.best_rmse() << '\n';
    man["best"] = {{"mu", sweep.best_mu()}, {"rmse_a", sweep.best_rmse()}};
    if (!o.out.empty()) {
        const fs::path out = prepare_out(o.out);
        write_text(out / "sweep.csv", csv.str());
    }
}

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

int run(std::vector<std::string> args);

int replay(const Options& o) {
    const json doc = read_json(o.manifest);
    if (!doc.contains("argv") || !doc["argv"].is_array()) throw IoError("manifest has no argv record");
    std::vector<std::string> args = doc["argv"].get<std::vector<std::string>>();
    if (!o.out.empty()) {
        auto it = std::find(args.begin(), args.end(), "--out");
        if (it != args.end() && std::next(it) != args.end())
            *std::next(it) = o.out;
        else {
            args.push_back("--out");
            args.push_back(o.out);
        }
    }
    return run(std::move(args));
}

void add_common(CLI::App* sub, Options& o, bool out_required) {
    auto* out = sub->add_option("--out", o.out, "Output directory");
    if (out_required) out->required();
    sub->add_option("--seed", o.seed, "Seed for every random choice");
    sub->add_option("--threads", o.threads, "Worker thread cap")->check(CLI::PositiveNumber);
}

int run(std::vector<std::string> args) {
    const std::vector<std::string> recorded = args;
    Options o;
    CLI::App app{"Blind multiscale nonlinear spectral unmixing"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "Write a synthetic scene bundle");
    add_common(gen, o, true);
    gen->add_option("--width", o.width, "Image width in pixels")->check(CLI::PositiveNumber);
    gen->add_option("--height", o.height, "Image height in pixels")->check(CLI::PositiveNumber);
    gen->add_option("--model", o.model, "Mixing model: lmm, blmm or pnmm");
    gen->add_option("--snr", o.snr, "Signal-to-noise ratio in dB, or inf");
    gen->add_option("--smoothness", o.smoothness, "Abundance correlation length in pixels");
    gen->add_option("--endmembers", o.endmembers, "Endmember CSV, one column per material");
    gen->add_option("--synthetic-endmembers", o.synthetic, "Number of synthetic endmembers to draw");
    gen->add_option("--bands", o.bands, "Band count for synthetic endmembers")->check(CLI::PositiveNumber);

    auto* unmix = app.add_subcommand("unmix", "Estimate abundances");
    add_common(unmix, o, true);
    unmix->add_option("--image", o.image, "Image cube");
    unmix->add_option("--endmembers", o.endmembers, "Endmember CSV");
    unmix->add_option("--algorithm", o.algorithm, "fcls, khype or bmua-n");
    unmix->add_option("--mu", o.mu, "K-Hype regularization")->check(CLI::PositiveNumber);
    unmix->add_option("--kernel", o.kernel, "centered or plain");
    unmix->add_option("--kmin", o.kmin, "Superpixel count bound");
    unmix->add_option("--kmax", o.kmax, "Superpixel count bound");
    unmix->add_option("--hom-eps", o.hom_eps, "Homogeneity tolerance for the count selection");
    unmix->add_option("--sigma-psi2", o.sigma_psi2, "Modelling-error variance, negative for the default");
    unmix->add_option("--compactness", o.compactness, "SLIC compactness, non-positive for the default");

    auto* eval = app.add_subcommand("evaluate", "Compare estimated and true abundances");
    add_common(eval, o, false);
    eval->add_option("--truth", o.truth, "True abundance CSV")->required();
    eval->add_option("--estimate", o.estimate, "Estimated abundance CSV")->required();
    eval->add_option("--image", o.image, "Image cube for reconstruction metrics");
    eval->add_option("--endmembers", o.endmembers, "Endmember CSV for reconstruction metrics");
    eval->add_option("--psi", o.psi, "Nonlinear part cube added to the reconstruction");

    auto* sweep = app.add_subcommand("sweep", "Tune K-Hype over a regularization grid");
    add_common(sweep, o, false);
    sweep->add_option("--image", o.image, "Image cube")->required();
    sweep->add_option("--endmembers", o.endmembers, "Endmember CSV")->required();
    sweep->add_option("--truth", o.truth, "True abundance CSV")->required();
    sweep->add_option("--grid", o.grid, "Comma-separated values of mu")->delimiter(',');
    sweep->add_option("--kernel", o.kernel, "centered or plain");

    auto* rep = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
    rep->add_option("--manifest", o.manifest, "manifest.json of an earlier run")->required();
    rep->add_option("--out", o.out, "Replacement output directory");

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    if (rep->parsed()) {
        try {
            return replay(o);
        } catch (const std::exception& e) {
            std::cerr << "error: [replay] " << e.what() << '\n';
            return kExitRuntime;
        }
    }

    CLI::App* sub = app.get_subcommands().front();
    Manifest man(sub->get_name(), recorded);
    man["seed"] = o.seed;
    man["out"] = o.out;
    int code = 0;
    try {
        if (sub == gen) cmd_generate(o, man);
        else if (sub == unmix) cmd_unmix(o, man);
        else if (sub == eval) cmd_evaluate(o, man);
        else cmd_sweep(o, man);
        man["status"] = "ok";
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        man["status"] = "failed";
        man["failed_stage"] = e.stage();
        man["error"] = e.what();
        code = kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: [" << sub->get_name() << "] " << e.what() << '\n';
        man["status"] = "failed";
        man["failed_stage"] = sub->get_name();
        man["error"] = e.what();
        code = kExitRuntime;
    }
    if (!o.out.empty()) {
        try {
            fs::create_directories(o.out);
            man.write(o.out);
        } catch (const std::exception& e) {
            std::cerr << "error: [manifest] " << e.what() << '\n';
            code = kExitRuntime;
        }
    }
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(std::move(args));
}
