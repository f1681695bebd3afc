#include "dpnet/gradsuite.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "dpnet/losses.hpp"
#include "dpnet/model.hpp"
#include "dpnet/ops.hpp"

namespace dpnet {
namespace {

Tensor rnd(Rng& rng, const Shape& s, double lo, double hi) {
  return tensor_create(s, Init::uniform(lo, hi), &rng);
}

// Random draw that stays at least `margin` away from every threshold in ts,
// so finite differences never cross a frozen branch of a mask op.
Tensor rnd_away(Rng& rng, const Shape& s, double lo, double hi,
                const std::vector<double>& ts, double margin) {
  Tensor t = Tensor::zeros(s);
  for (double& v : t.values_mut()) {
    for (int tries = 0; tries < 1000; ++tries) {
      const double c = rng.uniform(lo, hi);
      bool ok = true;
      for (double th : ts)
        if (std::abs(c - th) < margin) ok = false;
      if (ok) {
        v = c;
        break;
      }
    }
  }
  return t;
}

// Weighted sum collapses any tensor to a scalar without symmetric blind
// spots; the weights depend only on the shape so repeat evaluations agree.
Tensor collapse(const Tensor& t) {
  Tensor w = Tensor::zeros(t.shape());
  auto& wv = w.values_mut();
  for (size_t i = 0; i < wv.size(); ++i)
    wv[i] = std::sin(static_cast<double>(i) * 0.7 + 0.3) + 0.05;
  return reduce_sum(mul(t, w));
}

struct Suite {
  std::vector<GradSuiteCase> out;
  double tol;

  void run(const std::string& name, const ScalarFn& f,
           std::vector<Tensor> inputs) {
    GradSuiteCase c;
    c.name = name;
    c.result = gradcheck(f, std::move(inputs));
    c.pass = c.result.ok(tol);
    out.push_back(std::move(c));
  }
};

ModelSpec mini_spec() {
  ModelSpec s;
  s.shared_channels = 4;
  s.enh_channels = 4;
  s.det_base_channels = 4;
  s.det_head_channels = 6;
  s.det_levels = {2, 3};
  s.num_classes = 2;
  s.anchor_bases = {6, 12};
  s.anchor_ratios = {0.5, 1, 2};
  return s;
}

}  // namespace

std::vector<GradSuiteCase> run_gradcheck_suite(double tol) {
  Suite s;
  s.tol = tol;
  Rng rng(20240817);

  auto wsum = [](const Tensor& t) { return collapse(t); };

  s.run("add", [&](const std::vector<Tensor>& in) {
    return wsum(add(in[0], in[1]));
  }, {rnd(rng, {2, 3}, -1, 1), rnd(rng, {2, 3}, -1, 1)});

  s.run("sub", [&](const std::vector<Tensor>& in) {
    return wsum(sub(in[0], in[1]));
  }, {rnd(rng, {2, 3}, -1, 1), rnd(rng, {2, 3}, -1, 1)});

  s.run("mul", [&](const std::vector<Tensor>& in) {
    return wsum(mul(in[0], in[1]));
  }, {rnd(rng, {2, 3}, -1, 1), rnd(rng, {2, 3}, -1, 1)});

  s.run("div", [&](const std::vector<Tensor>& in) {
    return wsum(div(in[0], in[1]));
  }, {rnd(rng, {2, 3}, -1, 1), rnd(rng, {2, 3}, 0.5, 1.5)});

  s.run("add_scalar", [&](const std::vector<Tensor>& in) {
    return wsum(add_scalar(in[0], 0.7));
  }, {rnd(rng, {3, 2}, -1, 1)});

  s.run("mul_scalar", [&](const std::vector<Tensor>& in) {
    return wsum(mul_scalar(in[0], -1.3));
  }, {rnd(rng, {3, 2}, -1, 1)});

  s.run("relu", [&](const std::vector<Tensor>& in) {
    return wsum(relu(in[0]));
  }, {rnd(rng, {4, 4}, -1, 1)});

  s.run("sigmoid", [&](const std::vector<Tensor>& in) {
    return wsum(sigmoid(in[0]));
  }, {rnd(rng, {4, 4}, -3, 3)});

  s.run("neg", [&](const std::vector<Tensor>& in) {
    return wsum(neg(in[0]));
  }, {rnd(rng, {2, 5}, -1, 1)});

  s.run("square", [&](const std::vector<Tensor>& in) {
    return wsum(square(in[0]));
  }, {rnd(rng, {2, 5}, -1, 1)});

  s.run("log", [&](const std::vector<Tensor>& in) {
    return wsum(log(in[0]));
  }, {rnd(rng, {2, 5}, 0.2, 2.0)});

  s.run("exp", [&](const std::vector<Tensor>& in) {
    return wsum(exp(in[0]));
  }, {rnd(rng, {2, 5}, -1, 1)});

  s.run("sqrt", [&](const std::vector<Tensor>& in) {
    return wsum(sqrt(in[0]));
  }, {rnd(rng, {2, 5}, 0.2, 2.0)});

  s.run("abs", [&](const std::vector<Tensor>& in) {
    return wsum(abs(in[0]));
  }, {rnd(rng, {4, 4}, -1, 1)});

  s.run("clamp", [&](const std::vector<Tensor>& in) {
    return wsum(clamp(in[0], -0.5, 0.5));
  }, {rnd(rng, {4, 4}, -1, 1)});

  s.run("pow_scalar", [&](const std::vector<Tensor>& in) {
    return wsum(pow_scalar(in[0], 2.5));
  }, {rnd(rng, {2, 5}, 0.2, 2.0)});

  s.run("broadcast_to", [&](const std::vector<Tensor>& in) {
    return wsum(broadcast_to(in[0], {4, 3}));
  }, {rnd(rng, {1, 3}, -1, 1)});

  s.run("reduce_sum_axes", [&](const std::vector<Tensor>& in) {
    return wsum(reduce_sum(in[0], {1}));
  }, {rnd(rng, {3, 4}, -1, 1)});

  s.run("reduce_sum_keepdim", [&](const std::vector<Tensor>& in) {
    return wsum(reduce_sum(in[0], {0}, true));
  }, {rnd(rng, {3, 4}, -1, 1)});

  s.run("reduce_mean", [&](const std::vector<Tensor>& in) {
    return wsum(reduce_mean(in[0], {0}));
  }, {rnd(rng, {3, 4}, -1, 1)});

  s.run("reshape", [&](const std::vector<Tensor>& in) {
    return wsum(reshape(in[0], {3, 4}));
  }, {rnd(rng, {2, 6}, -1, 1)});

  s.run("permute", [&](const std::vector<Tensor>& in) {
    return wsum(permute(in[0], {2, 0, 1}));
  }, {rnd(rng, {2, 3, 4}, -1, 1)});

  s.run("slice0", [&](const std::vector<Tensor>& in) {
    return wsum(slice0(in[0], 1, 2));
  }, {rnd(rng, {4, 3}, -1, 1)});

  s.run("embed0", [&](const std::vector<Tensor>& in) {
    return wsum(embed0(in[0], 1, 4));
  }, {rnd(rng, {2, 3}, -1, 1)});

  s.run("concat0", [&](const std::vector<Tensor>& in) {
    return wsum(concat0({in[0], in[1]}));
  }, {rnd(rng, {2, 3}, -1, 1), rnd(rng, {3, 3}, -1, 1)});

  s.run("upsample_nearest", [&](const std::vector<Tensor>& in) {
    return wsum(upsample_nearest(in[0], 2));
  }, {rnd(rng, {1, 2, 3, 3}, -1, 1)});

  s.run("block_sum", [&](const std::vector<Tensor>& in) {
    return wsum(block_sum(in[0], 2));
  }, {rnd(rng, {1, 2, 4, 4}, -1, 1)});

  s.run("conv2d_s1p1", [&](const std::vector<Tensor>& in) {
    return wsum(conv2d(in[0], in[1], in[2], 1, 1));
  }, {rnd(rng, {1, 3, 5, 5}, -1, 1), rnd(rng, {2, 3, 3, 3}, -1, 1),
      rnd(rng, {2}, -1, 1)});

  s.run("conv2d_s2p1", [&](const std::vector<Tensor>& in) {
    return wsum(conv2d(in[0], in[1], in[2], 2, 1));
  }, {rnd(rng, {1, 3, 6, 6}, -1, 1), rnd(rng, {2, 3, 3, 3}, -1, 1),
      rnd(rng, {2}, -1, 1)});

  s.run("conv2d_s1p2_k5", [&](const std::vector<Tensor>& in) {
    return wsum(conv2d(in[0], in[1], in[2], 1, 2));
  }, {rnd(rng, {1, 2, 6, 6}, -1, 1), rnd(rng, {2, 2, 5, 5}, -1, 1),
      rnd(rng, {2}, -1, 1)});

  s.run("conv2d_input_grad", [&](const std::vector<Tensor>& in) {
    return wsum(conv2d_input_grad(in[0], in[1], 1, 1, 5, 5));
  }, {rnd(rng, {1, 2, 5, 5}, -1, 1), rnd(rng, {2, 3, 3, 3}, -1, 1)});

  s.run("conv2d_weight_grad", [&](const std::vector<Tensor>& in) {
    return wsum(conv2d_weight_grad(in[0], in[1], 1, 1, 3, 3));
  }, {rnd(rng, {1, 3, 5, 5}, -1, 1), rnd(rng, {1, 2, 5, 5}, -1, 1)});

  // Mask thresholds are frozen branches; inputs keep a wide margin so the
  // finite-difference probes stay on one side.
  s.run("gt_scalar_mask", [&](const std::vector<Tensor>& in) {
    return wsum(mul(in[0], gt_scalar_mask(in[0], 0.0)));
  }, {rnd_away(rng, {4, 4}, -1, 1, {0.0}, 0.05)});

  s.run("lt_scalar_mask", [&](const std::vector<Tensor>& in) {
    return wsum(mul(in[0], lt_scalar_mask(in[0], 0.0)));
  }, {rnd_away(rng, {4, 4}, -1, 1, {0.0}, 0.05)});

  s.run("sign_mask", [&](const std::vector<Tensor>& in) {
    return wsum(mul(in[0], sign_mask(in[0])));
  }, {rnd_away(rng, {4, 4}, -1, 1, {0.0}, 0.05)});

  s.run("inside_mask", [&](const std::vector<Tensor>& in) {
    return wsum(mul(in[0], inside_mask(in[0], -0.5, 0.5)));
  }, {rnd_away(rng, {4, 4}, -1, 1, {-0.5, 0.5}, 0.05)});

  {
    Tensor rm = Tensor::zeros({3});
    Tensor rv = Tensor::full({3}, 1.0);
    s.run("batchnorm2d_train", [&, rm, rv](const std::vector<Tensor>& in) {
      Tensor m = rm, v = rv;
      return wsum(batchnorm2d(in[0], in[1], in[2], m, v,
                              BnMode::TrainNoUpdate));
    }, {rnd(rng, {2, 3, 4, 4}, -1, 1), rnd(rng, {3}, 0.5, 1.5),
        rnd(rng, {3}, -0.5, 0.5)});

    s.run("batchnorm2d_eval", [&, rm, rv](const std::vector<Tensor>& in) {
      Tensor m = rm, v = rv;
      return wsum(batchnorm2d(in[0], in[1], in[2], m, v, BnMode::Eval));
    }, {rnd(rng, {2, 3, 4, 4}, -1, 1), rnd(rng, {3}, 0.5, 1.5),
        rnd(rng, {3}, -0.5, 0.5)});
  }

  // Composite objectives on a reduced model.
  {
    const ModelSpec spec = mini_spec();
    Anchors anchors = make_anchors(16, 16, spec);
    std::vector<Annotation> gts;
    gts.push_back({0, Box{2, 2, 9, 10}});
    gts.push_back({1, Box{8, 9, 15, 15}});
    AnchorTargets tgt = match_anchors(anchors, gts, spec, 0.5, 0.4);
    const size_t M = anchors.total();
    const size_t K = spec.num_classes;

    s.run("focal_loss", [&, tgt](const std::vector<Tensor>& in) {
      return focal_loss(in[0], tgt, 0.25, 2.0);
    }, {rnd(rng, {M, K}, -2, 2)});

    s.run("smooth_l1_loss", [&, tgt](const std::vector<Tensor>& in) {
      return smooth_l1_loss(in[0], tgt, 1.0 / 9.0);
    }, {rnd(rng, {M, 4}, -0.6, 0.6)});
  }

  s.run("ssim_block8", [&](const std::vector<Tensor>& in) {
    return ssim_block8(in[0], in[1]);
  }, {rnd(rng, {1, 3, 8, 8}, 0.1, 0.9), rnd(rng, {1, 3, 8, 8}, 0.1, 0.9)});

  s.run("enhancement_l1", [&](const std::vector<Tensor>& in) {
    return enhancement_loss(in[0], in[1], "l1");
  }, {rnd(rng, {1, 3, 8, 8}, 0.1, 0.9), rnd(rng, {1, 3, 8, 8}, 0.1, 0.9)});

  s.run("enhancement_l1_ssim", [&](const std::vector<Tensor>& in) {
    return enhancement_loss(in[0], in[1], "l1+ssim");
  }, {rnd(rng, {1, 3, 8, 8}, 0.1, 0.9), rnd(rng, {1, 3, 8, 8}, 0.1, 0.9)});

  // Joint objective: gradient of the full training loss wrt every parameter
  // of a reduced model on one 16x16 sample.
  {
    const ModelSpec spec = mini_spec();
    Rng mrng(31);
    Model m = Model::init(spec, mrng);
    Batch batch;
    batch.degraded = rnd(rng, {1, 3, 16, 16}, 0.05, 0.95);
    batch.reference = rnd(rng, {1, 3, 16, 16}, 0.05, 0.95);
    batch.anns.push_back({{0, Box{2, 2, 9, 10}}, {1, Box{8, 9, 15, 15}}});
    LossParams lp;
    lp.enh_mode = "l1+ssim";

    auto prefs = m.params_all();
    std::vector<Tensor> pts;
    for (auto& r : prefs) pts.push_back(r.t);
    const size_t nu = m.params_shared().size();

    s.run("joint_loss_mini", [&m, &batch, &lp, nu](const std::vector<Tensor>& in) {
      EnhanceParams e;
      DetectParams d;
      std::vector<Tensor> w(in.begin() + nu, in.end());
      m.lower_from_vec(w, e, d);
      SharedParams u{{in[0], in[1]}, {in[2], in[3]}, {in[4], in[5]}};
      return joint_loss(m, u, e, d, batch, lp, BnMode::TrainNoUpdate, "gc")
          .total;
    }, pts);
  }

  return s.out;
}

bool gradsuite_all_pass(const std::vector<GradSuiteCase>& cases) {
  for (const auto& c : cases)
    if (!c.pass) return false;
  return !cases.empty();
}

std::string gradsuite_table(const std::vector<GradSuiteCase>& cases,
                            double tol) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "case" << std::setw(8) << "status"
     << std::setw(14) << "max_rel_err" << std::setw(10) << "checked"
     << "skipped\n";
  for (const auto& c : cases) {
    os << std::left << std::setw(24) << c.name << std::setw(8)
       << (c.pass ? "PASS" : "FAIL") << std::setw(14) << std::scientific
       << std::setprecision(3) << c.result.max_rel_err << std::defaultfloat
       << std::setw(10) << c.result.checked << c.result.skipped << "\n";
  }
  size_t npass = 0;
  for (const auto& c : cases) npass += c.pass ? 1 : 0;
  os << npass << "/" << cases.size() << " checks within tolerance "
     << std::scientific << std::setprecision(1) << tol << std::defaultfloat
     << "\n";
  return os.str();
}

}  // namespace dpnet
