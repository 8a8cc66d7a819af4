#pragma once

// Conditional inverse models q = IM(p, z) and the CVAE pretrainer whose
// decoder doubles as an inverse model.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cemssl/errors.hpp"
#include "cemssl/kinematics.hpp"
#include "cemssl/nn.hpp"
#include "cemssl/random.hpp"

namespace cemssl {

struct LatentSample {
  std::vector<double> z;
};

// Network input is [p, z]; the sigmoid head is mapped onto the joint box.
struct InverseModel {
  NetworkParams params;
  std::size_t zdim = 0;
  std::string arm_id;

  void check_against(const ArmModel& arm) const {
    if (arm_id != arm.identity())
      throw UsageError("inverse model was built for arm '" + arm_id + "', got '" +
                       arm.identity() + "'");
    if (params.input_size() != arm.task_dim() + zdim)
      throw ShapeError("inverse model input width " + std::to_string(params.input_size()) +
                       " != task_dim + zdim = " + std::to_string(arm.task_dim() + zdim));
    if (params.output_size() != arm.dof())
      throw ShapeError("inverse model output width " + std::to_string(params.output_size()) +
                       " != arm dof " + std::to_string(arm.dof()));
    if (params.output_activation != Activation::Sigmoid)
      throw UsageError("inverse model needs a sigmoid output head");
  }
};

inline InverseModel make_inverse_model(const ArmModel& arm, std::size_t zdim,
                                       const std::vector<std::size_t>& hidden_layers,
                                       std::uint64_t seed) {
  if (zdim == 0) throw UsageError("zdim must be >= 1");
  std::vector<std::size_t> sizes{arm.task_dim() + zdim};
  sizes.insert(sizes.end(), hidden_layers.begin(), hidden_layers.end());
  sizes.push_back(arm.dof());
  InverseModel m;
  m.params = init_params(std::move(sizes), Activation::ReLU, Activation::Sigmoid, seed);
  m.zdim = zdim;
  m.arm_id = arm.identity();
  return m;
}

inline Matrix sample_latent_matrix(std::size_t zdim, std::size_t m, Rng& rng) {
  Matrix z(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(zdim));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = normal(rng);
  return z;
}

inline std::vector<LatentSample> sample_latents(std::size_t zdim, std::size_t m,
                                                std::uint64_t seed) {
  if (m == 0) throw UsageError("sample_latents needs m >= 1");
  Rng rng(seed);
  const Matrix z = sample_latent_matrix(zdim, m, rng);
  std::vector<LatentSample> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i].z.assign(z.row(r).data(), z.row(r).data() + z.cols());
  }
  return out;
}

inline Matrix concat_columns(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("row counts differ in concatenation");
  Matrix out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a;
  out.rightCols(b.cols()) = b;
  return out;
}

// Unit-cube network outputs (before mapping to the joint box).
inline Matrix im_infer_unit(const InverseModel& model, const Matrix& targets, const Matrix& z) {
  if (static_cast<std::size_t>(z.cols()) != model.zdim)
    throw ShapeError("latent width " + std::to_string(z.cols()) + " != zdim " +
                     std::to_string(model.zdim));
  return predict(model.params, concat_columns(targets, z));
}

inline Matrix im_infer(const InverseModel& model, const ArmModel& arm, const Matrix& targets,
                       const Matrix& z) {
  model.check_against(arm);
  if (static_cast<std::size_t>(targets.cols()) != arm.task_dim())
    throw ShapeError("target width " + std::to_string(targets.cols()) + " != task_dim " +
                     std::to_string(arm.task_dim()));
  return scale_to_limits(arm, im_infer_unit(model, targets, z));
}

inline JointConfig im_infer(const InverseModel& model, const ArmModel& arm, const TaskPoint& p,
                            const LatentSample& z) {
  if (p.position.size() != arm.task_dim()) throw ShapeError("target length != task_dim");
  if (z.z.size() != model.zdim) throw ShapeError("latent length != zdim");
  Matrix pm = Eigen::Map<const Matrix>(p.position.data(), 1,
                                       static_cast<Eigen::Index>(p.position.size()));
  Matrix zm = Eigen::Map<const Matrix>(z.z.data(), 1, static_cast<Eigen::Index>(z.z.size()));
  const Matrix q = im_infer(model, arm, pm, zm);
  return JointConfig{std::vector<double>(q.data(), q.data() + q.size())};
}

// ---------------------------------------------------------------------------
// CVAE

struct CVAEModel {
  NetworkParams encoder;  // [q_unit, p] -> [mu, logvar]
  InverseModel decoder;
  double beta = 1.0;
  double final_total = 0.0;
  double final_mse = 0.0;
  double final_kl = 0.0;
  std::vector<double> kl_history;  // mean KL per epoch
  std::vector<double> mse_history;
};

struct CVAELoss {
  double total = 0.0;
  double mse = 0.0;
  double kl = 0.0;
};

inline CVAELoss cvae_loss(const Matrix& q_true, const Matrix& q_recon, const Matrix& mu,
                          const Matrix& logvar, double beta) {
  if (!(beta > 0.0)) throw UsageError("cvae beta must be positive");
  if (q_true.rows() != q_recon.rows() || q_true.cols() != q_recon.cols())
    throw ShapeError("reconstruction shape " + shape_string(q_recon) + " != " +
                     shape_string(q_true));
  if (mu.rows() != logvar.rows() || mu.cols() != logvar.cols() || mu.rows() != q_true.rows())
    throw ShapeError("mu/logvar shapes are inconsistent with the batch");
  if (!q_true.allFinite() || !q_recon.allFinite() || !mu.allFinite() || !logvar.allFinite())
    throw NumericError("non-finite input to cvae_loss");
  const double n = static_cast<double>(std::max<Eigen::Index>(q_true.rows(), 1));
  CVAELoss out;
  out.mse = (q_true - q_recon).squaredNorm() / n;
  const double kl_sum =
      -0.5 * (1.0 + logvar.array() - mu.array().square() - logvar.array().exp()).sum();
  out.kl = kl_sum / n;
  out.total = out.mse + beta * out.kl;
  return out;
}

struct CVAEConfig {
  double beta = 1.0;
  std::size_t n_labeled = 20000;
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  double learning_rate = 0.0015;
  std::size_t zdim = 6;
  std::vector<std::size_t> decoder_hidden{1024, 512, 256, 128};
  std::vector<std::size_t> encoder_hidden{128, 256};
};

inline NetworkParams make_cvae_encoder(const ArmModel& arm, const CVAEConfig& cfg,
                                       std::uint64_t seed) {
  std::vector<std::size_t> sizes{arm.dof() + arm.task_dim()};
  sizes.insert(sizes.end(), cfg.encoder_hidden.begin(), cfg.encoder_hidden.end());
  sizes.push_back(2 * cfg.zdim);
  return init_params(std::move(sizes), Activation::ReLU, Activation::Identity, seed);
}

// One reparameterized pass over a batch. With `noise` all zero the decoder
// sees z == mu exactly.
struct CVAEPass {
  ForwardCache enc;
  ForwardCache dec;
  Matrix mu, logvar, noise, z;
  CVAELoss loss;
};

inline CVAEPass cvae_forward(const NetworkParams& encoder, const InverseModel& decoder,
                             const Matrix& q_unit, const Matrix& targets, const Matrix& noise,
                             double beta) {
  CVAEPass pass;
  const auto zdim = static_cast<Eigen::Index>(decoder.zdim);
  pass.enc = forward(encoder, concat_columns(q_unit, targets));
  pass.mu = pass.enc.output().leftCols(zdim);
  pass.logvar = pass.enc.output().rightCols(zdim);
  pass.noise = noise;
  pass.z = pass.mu.array() + (0.5 * pass.logvar.array()).exp() * noise.array();
  pass.dec = forward(decoder.params, concat_columns(targets, pass.z));
  pass.loss = cvae_loss(q_unit, pass.dec.output(), pass.mu, pass.logvar, beta);
  return pass;
}

struct CVAEGradients {
  Gradients encoder;
  Gradients decoder;
};

inline CVAEGradients cvae_backward(const NetworkParams& encoder, const InverseModel& decoder,
                                   const CVAEPass& pass, const Matrix& q_unit, double beta) {
  const double n = static_cast<double>(std::max<Eigen::Index>(q_unit.rows(), 1));
  const auto zdim = static_cast<Eigen::Index>(decoder.zdim);
  CVAEGradients g;
  Matrix dec_in_grad;
  g.decoder = backward(decoder.params, pass.dec, mse_loss_grad(pass.dec.output(), q_unit),
                       &dec_in_grad);
  const Matrix dz = dec_in_grad.rightCols(zdim);
  const Eigen::ArrayXXd sigma = (0.5 * pass.logvar.array()).exp();
  Matrix dmu = dz.array() + (beta / n) * pass.mu.array();
  Matrix dlogvar = dz.array() * pass.noise.array() * 0.5 * sigma +
                   (beta / n) * 0.5 * (pass.logvar.array().exp() - 1.0);
  Matrix enc_out_grad = concat_columns(dmu, dlogvar);
  g.encoder = backward(encoder, pass.enc, enc_out_grad);
  return g;
}

inline CVAEModel pretrain_cvae(const ArmModel& arm, const CVAEConfig& cfg, std::uint64_t seed) {
  if (cfg.n_labeled == 0) throw UsageError("pretrain_cvae needs n_labeled >= 1");
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw UsageError("batch size and epochs must be >= 1");
  CVAEModel model;
  model.beta = cfg.beta;
  model.encoder = make_cvae_encoder(arm, cfg, derive_seed(seed, "cvae-encoder"));
  model.decoder = make_inverse_model(arm, cfg.zdim, cfg.decoder_hidden,
                                     derive_seed(seed, "cvae-decoder"));

  Rng data_rng(derive_seed(seed, "cvae-data"));
  const Matrix q = sample_joint_configs(arm, cfg.n_labeled, data_rng);
  const Matrix p = batch_fk(arm, q, 1);
  const Matrix q_unit = unscale_from_limits(arm, q);

  AdamState enc_opt = AdamState::for_params(model.encoder, cfg.learning_rate);
  AdamState dec_opt = AdamState::for_params(model.decoder.params, cfg.learning_rate);
  Rng rng(derive_seed(seed, "cvae-train"));
  std::vector<Eigen::Index> order(cfg.n_labeled);
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum_total = 0, sum_mse = 0, sum_kl = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const auto rows = static_cast<Eigen::Index>(e - b);
      Matrix qb(rows, q_unit.cols()), pb(rows, p.cols());
      for (Eigen::Index r = 0; r < rows; ++r) {
        qb.row(r) = q_unit.row(order[b + static_cast<std::size_t>(r)]);
        pb.row(r) = p.row(order[b + static_cast<std::size_t>(r)]);
      }
      const Matrix noise = sample_latent_matrix(cfg.zdim, static_cast<std::size_t>(rows), rng);
      CVAEPass pass;
      try {
        pass = cvae_forward(model.encoder, model.decoder, qb, pb, noise, cfg.beta);
      } catch (const NumericError&) {
        throw TrainingError("cvae pretraining diverged in epoch " + std::to_string(epoch + 1));
      }
      if (!std::isfinite(pass.loss.total))
        throw TrainingError("cvae pretraining diverged in epoch " + std::to_string(epoch + 1));
      const CVAEGradients g = cvae_backward(model.encoder, model.decoder, pass, qb, cfg.beta);
      try {
        adam_step(model.encoder, g.encoder, enc_opt);
        adam_step(model.decoder.params, g.decoder, dec_opt);
      } catch (const NumericError& err) {
        throw TrainingError("cvae pretraining diverged in epoch " + std::to_string(epoch + 1) +
                            ": " + err.what());
      }
      const double w = static_cast<double>(rows);
      sum_total += w * pass.loss.total;
      sum_mse += w * pass.loss.mse;
      sum_kl += w * pass.loss.kl;
    }
    const double n = static_cast<double>(order.size());
    model.final_total = sum_total / n;
    model.final_mse = sum_mse / n;
    model.final_kl = sum_kl / n;
    model.kl_history.push_back(model.final_kl);
    model.mse_history.push_back(model.final_mse);
  }
  return model;
}

}  // namespace cemssl
