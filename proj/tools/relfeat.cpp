#include <iostream>

#include "CLI11.hpp"
#include "relfeat/pipeline.hpp"

using namespace relfeat;

namespace {

void add_data(CLI::App* app, RunConfig& c) {
  app->add_option("--data", c.data, "Flower variant directory (or its parent) or MNIST IDX directory");
  app->add_option("--variant", c.variant, "single-6c | double-12c | part-2c")->capture_default_str();
  app->add_option("--fold", c.fold, "Held-out fold")->capture_default_str();
}

void add_model(CLI::App* app, RunConfig& c, bool relevance) {
  app->add_option("--model", c.model, "Model file");
  if (relevance) app->add_option("--relevance", c.relevance, "W file written by select");
}

void add_common(CLI::App* app, RunConfig& c) {
  app->add_option("--out", c.out, "Output directory (default: $RELFEAT_OUT/<command>)");
  app->add_option("--seed", c.seed, "Root seed for every random stream")->capture_default_str();
  app->add_option("--threads", c.threads, "Worker threads")->capture_default_str();
  app->add_option("--mu", c.mu, "l1 radius")->capture_default_str();
  app->add_option("--k", c.k, "Relevant features per explanation")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relevant-feature selection and deconvnet heatmaps for small CNNs"};
  app.require_subcommand(1);
  RunConfig c;

  auto* gen = app.add_subcommand("gen-dataset", "Render a synthetic flower variant with masks and folds");
  gen->add_option("--variant", c.variant, "single-6c | double-12c | part-2c")->capture_default_str();
  gen->add_option("--profile", c.profile, "mini | full")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train the flower or MNIST network on the fit split");
  add_data(tr, c);
  tr->add_option("--epochs", c.epochs, "Epochs (default depends on the dataset)");
  tr->add_option("--batch-size", c.batch_size, "Minibatch size");
  tr->add_option("--lr", c.learning_rate, "Learning rate");
  tr->add_option("--weight-decay", c.weight_decay, "L2 weight decay");

  auto* ex = app.add_subcommand("extract", "Write response matrices for the fit and held-out splits");
  add_data(ex, c);
  add_model(ex, c, false);

  auto* sel = app.add_subcommand("select", "Solve the mu-lasso for every class and write the W file");
  sel->add_option("--matrices", c.matrices, "Fit-split matrices from extract")->required();

  auto* expl = app.add_subcommand("explain", "Top-k relevant features and heatmaps for one image");
  add_data(expl, c);
  add_model(expl, c, true);
  expl->add_option("--image", c.image, "PNG to explain instead of a held-out sample");
  expl->add_option("--index", c.index, "Held-out sample index")->capture_default_str();
  expl->add_option("--mode", c.mode, "ours | deconv_gb_vanilla | upsampled_activation")->capture_default_str();

  auto* interp = app.add_subcommand("interpret", "Average receptive-field patches of relevant features");
  add_data(interp, c);
  add_model(interp, c, true);
  interp->add_option("--class", c.class_id, "Class index (default: all)");
  interp->add_option("--top-n", c.top_n, "Images averaged per feature")->capture_default_str();

  auto* abl = app.add_subcommand("eval-ablation", "Accuracy after zeroing relevant, conv-only and random features");
  add_data(abl, c);
  add_model(abl, c, true);
  abl->add_option("--steps", c.ablation_steps, "Schedule points")->capture_default_str();
  abl->add_option("--random-seeds", c.random_seeds, "Random-condition repetitions")->capture_default_str();
  abl->add_option("--max-images", c.max_images, "Limit the held-out split (0 = all)");

  auto* iou = app.add_subcommand("eval-iou", "Area under the heatmap/mask IoU curve");
  add_data(iou, c);
  add_model(iou, c, true);
  iou->add_option("--models", c.models, "One model per fold");
  iou->add_option("--relevances", c.relevances, "One W file per fold");
  iou->add_option("--folds", c.folds, "Fold of each model");
  iou->add_option("--mode", c.mode, "Heatmap mode or 'all'")->capture_default_str();
  iou->add_option("--threshold-step", c.threshold_step, "Spacing of the threshold sweep")->capture_default_str();
  iou->add_option("--max-images", c.max_images, "Limit the held-out split (0 = all)");

  auto* occ = app.add_subcommand("eval-occlusion", "Heatmap-guided versus random occlusion");
  add_data(occ, c);
  add_model(occ, c, true);
  occ->add_option("--mode", c.mode, "Heatmap mode guiding the patches")->capture_default_str();
  occ->add_option("--patch", c.occlusion_patch, "Patch side (0 = ceil(side / 8))");
  occ->add_option("--coverage", c.occlusion_coverage, "Maximum occluded fraction")->capture_default_str();
  occ->add_flag("--stochastic", c.occlusion_stochastic, "Sample placements from the heatmap mass");
  occ->add_option("--random-seeds", c.random_seeds, "Random placements per image")->capture_default_str();
  occ->add_option("--max-images", c.max_images, "Limit the held-out split (0 = all)");

  auto* san = app.add_subcommand("eval-sanity", "Same-class versus cross-class heatmap dissimilarity");
  add_data(san, c);
  add_model(san, c, true);
  san->add_option("--images", c.sanity_images, "Crop pairs to evaluate")->capture_default_str();

  auto* rec = app.add_subcommand("eval-reconstruction", "Held-out mean ROC-AUC of X^T w_j over several mu");
  rec->add_option("--matrices", c.matrices, "Fit-split matrices")->required();
  rec->add_option("--test-matrices", c.test_matrices, "Held-out matrices")->required();
  rec->add_option("--mus", c.mus, "Radii to sweep")->capture_default_str();

  auto* rep = app.add_subcommand("report", "Collate IoU TSVs into a per-fold and mean +- std table");
  rep->add_option("--inputs", c.inputs, "TSV files or directories")->required();

  for (auto* sub : app.get_subcommands({})) add_common(sub, c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help();
    return 2;
  }
  c.command = app.get_subcommands().front()->get_name();
  try {
    const auto results = run(c);
    std::cout << results.dump(2) << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "relfeat " << c.command << ": " << e.what() << '\n';
    if (exit_code_for(e) == 2) std::cerr << app.get_subcommands().front()->help();
    return exit_code_for(e);
  }
}
