#include "fedtabgan/gan.hpp"

#include "fedtabgan/errors.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fedtabgan::gan {

namespace {

constexpr double kProbClamp = 1e-7;
constexpr std::uint64_t kGenerateStream = 0x67656E6572617465ULL;
constexpr std::size_t kGenerateChunk = 4096;

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

nn::Matrix draw_noise(Rng& rng, std::size_t rows, std::size_t dim) {
    nn::Matrix z(rows, dim);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
    return z;
}

nn::Matrix stack(const nn::Matrix& top, const nn::Matrix& bottom) {
    nn::Matrix out(top.rows() + bottom.rows(), top.cols());
    out.topRows(top.rows()) = top;
    out.bottomRows(bottom.rows()) = bottom;
    return out;
}

void check_real_batch(const GanModel& model, const nn::Matrix& real_batch) {
    if (real_batch.rows() == 0) throw UsageError("empty real batch");
    if (real_batch.cols() != static_cast<Eigen::Index>(model.config.feature_dim))
        throw ShapeError("real batch has " + std::to_string(real_batch.cols()) + " columns, model expects " +
                         std::to_string(model.config.feature_dim));
}

StepResult vanilla_d_step(GanModel& model, const nn::Matrix& real) {
    const auto n = real.rows();
    const double inv_n = 1.0 / static_cast<double>(n);
    const nn::Matrix fake = nn::predict(model.generator, draw_noise(model.rng, static_cast<std::size_t>(n),
                                                                    model.config.noise_dim));
    auto fwd = nn::forward(model.discriminator, stack(real, fake));
    const auto& y = fwd.output;

    double loss = 0.0;
    nn::Matrix grad(2 * n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        loss -= std::log(clamp_prob(y(i, 0))) * inv_n;
        grad(i, 0) = (y(i, 0) - 1.0) * inv_n;
    }
    for (Eigen::Index i = n; i < 2 * n; ++i) {
        loss -= std::log(1.0 - clamp_prob(y(i, 0))) * inv_n;
        grad(i, 0) = y(i, 0) * inv_n;
    }
    if (!std::isfinite(loss))
        throw NumericalError("non-finite discriminator loss", static_cast<std::int64_t>(model.d_updates));
    auto grads = nn::backward(model.discriminator, fwd.cache, grad,
                              {.parameter_gradients = true, .input_gradient = false, .gradient_wrt_preactivation = true});
    nn::adam_step(model.discriminator, grads.params, model.d_opt);
    ++model.d_updates;
    return {loss, std::nullopt};
}

StepResult wgan_d_step(GanModel& model, const nn::Matrix& real) {
    const auto n = real.rows();
    const double inv_n = 1.0 / static_cast<double>(n);
    const nn::Matrix fake = nn::predict(model.generator, draw_noise(model.rng, static_cast<std::size_t>(n),
                                                                    model.config.noise_dim));
    auto fwd = nn::forward(model.discriminator, stack(real, fake));
    const auto& scores = fwd.output;
    const double w_loss = scores.bottomRows(n).mean() - scores.topRows(n).mean();

    nn::Matrix grad(2 * n, 1);
    grad.topRows(n).setConstant(-inv_n);
    grad.bottomRows(n).setConstant(inv_n);
    auto grads = nn::backward(model.discriminator, fwd.cache, grad,
                              {.parameter_gradients = true, .input_gradient = false});

    std::vector<double> mix(static_cast<std::size_t>(n));
    for (auto& u : mix) u = model.rng.uniform();
    auto penalty = gradient_penalty(model.discriminator, real, fake, model.config.gp_lambda, mix);
    for (std::size_t k = 0; k < grads.params.size(); ++k) {
        grads.params[k].weights += penalty.gradients[k].weights;
        grads.params[k].biases += penalty.gradients[k].biases;
    }
    const double loss = w_loss + penalty.value;
    if (!std::isfinite(loss))
        throw NumericalError("non-finite critic loss", static_cast<std::int64_t>(model.d_updates));
    nn::adam_step(model.discriminator, grads.params, model.d_opt);
    ++model.d_updates;
    return {loss, penalty.value};
}

}  // namespace

std::string_view to_string(LossKind kind) { return kind == LossKind::vanilla ? "vanilla" : "wgan_gp"; }

LossKind loss_kind_from_string(std::string_view name) {
    if (name == "vanilla") return LossKind::vanilla;
    if (name == "wgan_gp" || name == "wgan-gp") return LossKind::wgan_gp;
    throw ConfigError("unknown loss kind '" + std::string(name) + "' (expected vanilla or wgan_gp)");
}

void validate(const GanConfig& c) {
    if (c.feature_dim == 0) throw ConfigError("feature_dim must be positive");
    if (c.noise_dim == 0) throw ConfigError("noise_dim must be positive");
    for (auto d : c.g_hidden)
        if (d == 0) throw ConfigError("g_hidden dims must be positive");
    for (auto d : c.d_hidden)
        if (d == 0) throw ConfigError("d_hidden dims must be positive");
    if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate))
        throw ConfigError("learning_rate must be finite and non-negative");
    if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
    if (c.d_steps_per_g_step == 0) throw ConfigError("d_steps_per_g_step must be at least 1");
    if (!(c.gp_lambda >= 0.0) || !std::isfinite(c.gp_lambda))
        throw ConfigError("gp_lambda must be finite and non-negative");
}

std::string to_text(const GanConfig& c) {
    std::ostringstream ss;
    ss << "feature_dim=" << c.feature_dim << '\n'
       << "noise_dim=" << c.noise_dim << '\n'
       << "g_hidden=" << join_sizes(c.g_hidden) << '\n'
       << "d_hidden=" << join_sizes(c.d_hidden) << '\n'
       << "learning_rate=" << format_double(c.learning_rate) << '\n'
       << "batch_size=" << c.batch_size << '\n'
       << "d_steps_per_g_step=" << c.d_steps_per_g_step << '\n'
       << "loss=" << to_string(c.loss_kind) << '\n'
       << "gp_lambda=" << format_double(c.gp_lambda) << '\n'
       << "seed=" << c.seed << '\n';
    return ss.str();
}

GanConfig config_from_key_values(const KeyValues& kv, GanConfig base) {
    GanConfig c = std::move(base);
    c.feature_dim = kv_uint(kv, "feature_dim", c.feature_dim);
    c.noise_dim = kv_uint(kv, "noise_dim", c.noise_dim);
    if (auto it = kv.find("g_hidden"); it != kv.end())
        c.g_hidden = it->second.empty() ? std::vector<std::size_t>{} : parse_size_list(it->second, "g_hidden");
    if (auto it = kv.find("d_hidden"); it != kv.end())
        c.d_hidden = it->second.empty() ? std::vector<std::size_t>{} : parse_size_list(it->second, "d_hidden");
    c.learning_rate = kv_double(kv, "learning_rate", c.learning_rate);
    c.batch_size = kv_uint(kv, "batch_size", c.batch_size);
    c.d_steps_per_g_step = kv_uint(kv, "d_steps_per_g_step", c.d_steps_per_g_step);
    if (auto it = kv.find("loss"); it != kv.end()) c.loss_kind = loss_kind_from_string(it->second);
    c.gp_lambda = kv_double(kv, "gp_lambda", c.gp_lambda);
    c.seed = kv_uint(kv, "seed", c.seed);
    return c;
}

ConfigDigest digest(const GanConfig& config) {
    const std::string text = to_text(config);
    ConfigDigest out{};
    unsigned int len = 0;
    if (EVP_Digest(text.data(), text.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
        throw Error("SHA-256 computation failed");
    return out;
}

std::string to_hex(std::span<const std::uint8_t> bytes) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (auto b : bytes) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 0xF]);
    }
    return out;
}

std::vector<nn::LayerSpec> generator_specs(const GanConfig& c) {
    std::vector<nn::LayerSpec> specs;
    std::size_t in = c.noise_dim;
    for (auto h : c.g_hidden) {
        specs.push_back({in, h, nn::Activation::leaky_relu});
        in = h;
    }
    specs.push_back({in, c.feature_dim, nn::Activation::tanh});
    return specs;
}

std::vector<nn::LayerSpec> discriminator_specs(const GanConfig& c) {
    std::vector<nn::LayerSpec> specs;
    std::size_t in = c.feature_dim;
    for (auto h : c.d_hidden) {
        specs.push_back({in, h, nn::Activation::leaky_relu});
        in = h;
    }
    specs.push_back({in, 1, c.loss_kind == LossKind::vanilla ? nn::Activation::sigmoid : nn::Activation::identity});
    return specs;
}

GanModel build_gan(const GanConfig& config, std::uint64_t stream) {
    validate(config);
    GanModel model;
    model.config = config;
    model.generator = nn::init_network(generator_specs(config), splitmix64(config.seed ^ 0x47454E0000000000ULL));
    model.discriminator = nn::init_network(discriminator_specs(config), splitmix64(config.seed ^ 0x4449530000000000ULL));
    model.g_opt = nn::make_adam_state(model.generator, config.learning_rate);
    model.d_opt = nn::make_adam_state(model.discriminator, config.learning_rate);
    model.rng = Rng(config.seed, stream);
    return model;
}

StepResult d_train_step(GanModel& model, const nn::Matrix& real_batch) {
    check_real_batch(model, real_batch);
    return model.config.loss_kind == LossKind::vanilla ? vanilla_d_step(model, real_batch)
                                                       : wgan_d_step(model, real_batch);
}

StepResult g_train_step(GanModel& model) { return g_train_step(model, model.config.batch_size); }

StepResult g_train_step(GanModel& model, std::size_t batch_rows) {
    if (batch_rows == 0) throw UsageError("generator step needs a positive batch size");
    const double inv_n = 1.0 / static_cast<double>(batch_rows);
    auto gen = nn::forward(model.generator, draw_noise(model.rng, batch_rows, model.config.noise_dim));
    auto disc = nn::forward(model.discriminator, gen.output);
    const auto& y = disc.output;
    const auto n = y.rows();

    double loss = 0.0;
    nn::Matrix grad(n, 1);
    const bool vanilla = model.config.loss_kind == LossKind::vanilla;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (vanilla) {
            loss -= std::log(clamp_prob(y(i, 0))) * inv_n;
            grad(i, 0) = (y(i, 0) - 1.0) * inv_n;
        } else {
            loss -= y(i, 0) * inv_n;
            grad(i, 0) = -inv_n;
        }
    }
    if (!std::isfinite(loss))
        throw NumericalError("non-finite generator loss", static_cast<std::int64_t>(model.g_updates));
    auto d_grads = nn::backward(model.discriminator, disc.cache, grad,
                                {.parameter_gradients = false, .input_gradient = true, .gradient_wrt_preactivation = vanilla});
    auto g_grads = nn::backward(model.generator, gen.cache, d_grads.input,
                                {.parameter_gradients = true, .input_gradient = false});
    nn::adam_step(model.generator, g_grads.params, model.g_opt);
    ++model.g_updates;
    return {loss, std::nullopt};
}

PenaltyResult gradient_penalty(const nn::Network& critic, const nn::Matrix& real_batch, const nn::Matrix& fake_batch,
                               double lambda, std::span<const double> mix) {
    const auto n = real_batch.rows();
    if (n == 0 || fake_batch.rows() == 0) throw UsageError("gradient penalty needs non-empty batches");
    if (fake_batch.rows() != n || fake_batch.cols() != real_batch.cols())
        throw ShapeError("real and fake batches differ in shape");
    if (mix.size() != static_cast<std::size_t>(n)) throw ShapeError("one interpolation weight per row is required");
    const std::size_t layers = critic.layer_count();
    if (critic.specs().back().activation != nn::Activation::identity)
        throw UsageError("gradient penalty requires an identity critic head");
    for (std::size_t l = 0; l + 1 < layers; ++l) {
        const auto act = critic.specs()[l].activation;
        if (act != nn::Activation::leaky_relu && act != nn::Activation::identity)
            throw UsageError("gradient penalty requires piecewise-linear hidden activations");
    }

    nn::Matrix interp(n, real_batch.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const double u = mix[static_cast<std::size_t>(i)];
        interp.row(i) = u * real_batch.row(i) + (1.0 - u) * fake_batch.row(i);
    }
    const auto fwd = nn::forward(critic, interp);
    const auto& params = critic.params();

    // slopes[l]: derivative of layer l's activation at its pre-activation.
    // chain[l]: gradient of the critic output with respect to Z_l, per row.
    std::vector<nn::Matrix> slopes(layers);
    for (std::size_t l = 0; l < layers; ++l)
        slopes[l] = nn::activation_derivative(critic.specs()[l].activation, fwd.cache.pre_activations[l],
                                              fwd.cache.activations[l + 1]);
    std::vector<nn::Matrix> chain(layers);
    chain[layers - 1] = nn::Matrix::Ones(n, 1);
    for (std::size_t l = layers - 1; l-- > 0;) {
        nn::Matrix back(n, params[l + 1].weights.cols());
        back.noalias() = chain[l + 1] * params[l + 1].weights;
        chain[l] = back.cwiseProduct(slopes[l]);
    }
    nn::Matrix input_grad(n, params[0].weights.cols());
    input_grad.noalias() = chain[0] * params[0].weights;

    PenaltyResult result;
    nn::Matrix outer(n, input_grad.cols());  // d penalty / d input_grad
    const double scale = lambda / static_cast<double>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double norm = input_grad.row(i).norm();
        result.value += scale * (norm - 1.0) * (norm - 1.0);
        const double coef = norm > 0.0 ? scale * 2.0 * (norm - 1.0) / norm : 0.0;
        outer.row(i) = coef * input_grad.row(i);
    }

    // Reverse pass through the input-gradient computation.
    result.gradients.reserve(layers);
    for (const auto& p : params) result.gradients.push_back(nn::DenseParams::zeros_like(p));
    nn::Matrix adj = outer;
    for (std::size_t l = 0; l < layers; ++l) {
        result.gradients[l].weights.noalias() = chain[l].transpose() * adj;
        if (l + 1 < layers) {
            nn::Matrix next(n, params[l].weights.rows());
            next.noalias() = adj * params[l].weights.transpose();
            adj = next.cwiseProduct(slopes[l]);
        }
    }
    return result;
}

std::string format_log_csv(const TrainLog& log) {
    std::ostringstream ss;
    ss << "step,d_loss,g_loss,gp,elapsed_ms\n";
    for (const auto& r : log.records) {
        ss << r.step << ',' << format_double(r.d_loss) << ',' << format_double(r.g_loss) << ',';
        if (r.gp) ss << format_double(*r.gp);
        ss << ',' << format_double(r.elapsed_ms) << '\n';
    }
    return ss.str();
}

void write_log_csv(const TrainLog& log, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << format_log_csv(log);
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

TrainLog train(GanModel& model, const data::PatientMatrix& data, std::uint64_t epochs, const TrainHooks& hooks) {
    validate(model.config);
    if (data.rows() == 0) throw UsageError("training data is empty");
    if (data.cols() != model.config.feature_dim)
        throw ConfigError("training data has " + std::to_string(data.cols()) + " features, model expects " +
                          std::to_string(model.config.feature_dim));
    TrainLog log;
    std::size_t batch = model.config.batch_size;
    if (batch > data.rows()) {
        log.warnings.push_back("batch_size " + std::to_string(batch) + " exceeds " + std::to_string(data.rows()) +
                               " training rows; clamped");
        batch = data.rows();
    }
    if (epochs == 0) return log;

    std::vector<std::size_t> order(data.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    model.rng.shuffle(std::span<std::size_t>(order));
    std::size_t cursor = 0;
    const auto start = std::chrono::steady_clock::now();
    log.records.reserve(static_cast<std::size_t>(epochs));

    for (std::uint64_t e = 0; e < epochs; ++e) {
        TrainRecord rec;
        rec.step = e;
        double d_total = 0.0;
        double gp_total = 0.0;
        bool has_gp = false;
        for (std::size_t s = 0; s < model.config.d_steps_per_g_step; ++s) {
            if (cursor + batch > order.size()) {
                model.rng.shuffle(std::span<std::size_t>(order));
                cursor = 0;
            }
            std::span<const std::size_t> rows(order.data() + cursor, batch);
            cursor += batch;
            if (hooks.on_minibatch) hooks.on_minibatch(data, rows);
            const auto r = d_train_step(model, data::encode_pm1(data, rows));
            ++log.d_updates;
            d_total += r.loss;
            if (r.gradient_penalty) {
                gp_total += *r.gradient_penalty;
                has_gp = true;
            }
        }
        const auto g = g_train_step(model, batch);
        ++log.g_updates;
        const auto steps = static_cast<double>(model.config.d_steps_per_g_step);
        rec.d_loss = d_total / steps;
        rec.g_loss = g.loss;
        if (has_gp) rec.gp = gp_total / steps;
        rec.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        log.records.push_back(rec);
        if (hooks.on_step) hooks.on_step(rec);
    }
    return log;
}

TrainLog wgan_train(GanModel& model, const data::PatientMatrix& data, std::uint64_t epochs, const TrainHooks& hooks) {
    if (model.config.loss_kind != LossKind::wgan_gp) throw UsageError("wgan_train requires loss_kind wgan_gp");
    return train(model, data, epochs, hooks);
}

nn::Matrix generate_raw(const GanModel& model, std::size_t n, std::uint64_t seed) {
    nn::Matrix out(n, model.config.feature_dim);
    Rng rng(seed, kGenerateStream);
    for (std::size_t start = 0; start < n; start += kGenerateChunk) {
        const std::size_t rows = std::min(kGenerateChunk, n - start);
        out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(rows)) =
            nn::predict(model.generator, draw_noise(rng, rows, model.config.noise_dim));
    }
    return out;
}

data::PatientMatrix generate(const GanModel& model, std::size_t n, std::uint64_t seed) {
    if (n == 0) return data::PatientMatrix(0, model.config.feature_dim);
    return data::binarize(generate_raw(model, n, seed), 0.0);
}

}  // namespace fedtabgan::gan
