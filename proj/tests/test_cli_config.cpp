// Config grammar and plain-text serialization: exact round-trips for configs,
// fields, landmarks, maps, controls, and PGM images, plus the parse errors.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "msdiffeo/config.hpp"
#include "msdiffeo/io.hpp"

using namespace msdiffeo;
using Catch::Matchers::ContainsSubstring;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("msdiffeo_io_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("seventeen significant digits round-trip doubles exactly", "[io]") {
  for (double v : {1.0 / 3.0, 0.1 + 0.2, -6.02214076e23, 1e-17, 3.14159265358979312,
                   -0.0, 4097.000000000001}) {
    const std::string s = detail::fmt17(v);
    CHECK(detail::parse_double(s, "test") == v);
  }

  CHECK_THROWS_AS(detail::parse_double("abc", "test"), std::invalid_argument);
  CHECK_THROWS_AS(detail::parse_double("1.5x", "test"), std::invalid_argument);
  CHECK_THROWS_AS(detail::parse_double("", "test"), std::invalid_argument);
  CHECK_THROWS_AS(detail::parse_double("1e999", "test"), std::invalid_argument);
  CHECK_THROWS_AS(detail::parse_int("12.5", "test"), std::invalid_argument);
  CHECK_THROWS_AS(detail::parse_int("abc", "test"), std::invalid_argument);
  CHECK_THROWS_AS(detail::parse_int("99999999999999999999", "test"),
                  std::invalid_argument);
}

TEST_CASE("finite-kernel configs serialize and parse back identically", "[config]") {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.out = "runout";
  cfg.source = "lm_src.csv";
  cfg.target = "lm_tgt.csv";
  cfg.control = "warm_start.csv";
  cfg.data_weight = 123.45678901234567;
  cfg.kernel_mode = "finite";
  cfg.components = {{0.25, 1.0}, {0.05, 0.6}};
  cfg.formulation = "sdp_coarse_first";
  cfg.ordering = "coarse_first";
  cfg.time_steps = 12;
  cfg.scale_nodes = 5;
  cfg.grid_nx = 33;
  cfg.grid_ny = 17;
  cfg.grid_h = 0.03125;
  cfg.grid_ox = 0.5;
  cfg.grid_oy = -0.25;
  cfg.optimizer.max_iters = 77;
  cfg.optimizer.step_init = 0.125;
  cfg.optimizer.grad_tol = 1e-9;

  const RunConfig back = parse_config(serialize_config(cfg));
  CHECK(back.seed == cfg.seed);
  CHECK(back.out == cfg.out);
  CHECK(back.source == cfg.source);
  CHECK(back.target == cfg.target);
  CHECK(back.control == cfg.control);
  CHECK(back.data_weight == cfg.data_weight);
  CHECK(back.kernel_mode == cfg.kernel_mode);
  CHECK(back.components == cfg.components);
  CHECK(back.formulation == cfg.formulation);
  CHECK(back.ordering == cfg.ordering);
  CHECK(back.time_steps == cfg.time_steps);
  CHECK(back.scale_nodes == cfg.scale_nodes);
  CHECK(back.grid_nx == cfg.grid_nx);
  CHECK(back.grid_ny == cfg.grid_ny);
  CHECK(back.grid_h == cfg.grid_h);
  CHECK(back.grid_ox == cfg.grid_ox);
  CHECK(back.grid_oy == cfg.grid_oy);
  CHECK(back.optimizer.max_iters == cfg.optimizer.max_iters);
  CHECK(back.optimizer.step_init == cfg.optimizer.step_init);
  CHECK(back.optimizer.grad_tol == cfg.optimizer.grad_tol);

  const KernelSpec k = back.kernel();
  CHECK(k.mode == KernelMode::Finite);
  REQUIRE(k.components.size() == 2);
  const Grid2 g = back.grid();
  CHECK(g.nx == 33);
  CHECK(g.h == 0.03125);
  CHECK(g.oy == -0.25);
  CHECK(back.ordering_tag() == Ordering::CoarseFirst);

  // Unset grid spacing derives from the longer side.
  RunConfig derived;
  derived.grid_nx = 65;
  derived.grid_ny = 33;
  CHECK(derived.grid().h == 1.0 / 64.0);
}

TEST_CASE("continuum configs carry their quadrature and edges", "[config]") {
  RunConfig cfg;
  cfg.kernel_mode = "continuum";
  cfg.smin = -0.5;
  cfg.smax = 2.0;
  cfg.nodes = 9;
  cfg.sigma_min = 0.04;
  cfg.sigma_max = 0.5;
  cfg.scale_edges = {-0.5, 0.3, 2.0};
  cfg.formulation = "integral_kernel";

  const RunConfig back = parse_config(serialize_config(cfg));
  CHECK(back.kernel_mode == "continuum");
  CHECK(back.smin == cfg.smin);
  CHECK(back.smax == cfg.smax);
  CHECK(back.nodes == cfg.nodes);
  CHECK(back.sigma_min == cfg.sigma_min);
  CHECK(back.sigma_max == cfg.sigma_max);
  CHECK(back.scale_edges == cfg.scale_edges);
  CHECK(back.formulation == "integral_kernel");
  CHECK(back.kernel().mode == KernelMode::Continuum);

  // Whitespace and comments are tolerated; defaults parse.
  CHECK_NOTHROW(parse_config(""));
  const RunConfig ws = parse_config("# comment\n\n  seed =  9  \n");
  CHECK(ws.seed == 9);
}

TEST_CASE("config parsing rejects malformed and out-of-range input", "[config]") {
  CHECK_THROWS_WITH(parse_config("mystery = 3\n"),
                    ContainsSubstring("unknown config key: 'mystery'"));
  CHECK_THROWS_WITH(parse_config("kernel.mode finite\n"),
                    ContainsSubstring("not 'key = value'"));
  CHECK_THROWS_WITH(parse_config("= 5\n"), ContainsSubstring("empty key"));
  CHECK_THROWS_WITH(parse_config("kernel.component = 0.25\n"),
                    ContainsSubstring("sigma,weight"));
  CHECK_THROWS_WITH(parse_config("formulation = wiggle\n"),
                    ContainsSubstring("unknown formulation: wiggle"));
  CHECK_THROWS_AS(parse_config("ordering = sideways\n"), std::invalid_argument);
  CHECK_THROWS_WITH(parse_config("time.steps = 0\n"),
                    ContainsSubstring("time.steps must be positive"));
  CHECK_THROWS_AS(parse_config("time.scale_nodes = 0\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("grid.nx = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("optimizer.backtrack = 1.5\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("data.kind = mesh\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("kernel.mode = fuzzy\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("data.weight = abc\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("time.steps = 3.5\n"), std::invalid_argument);

  // Kernel assembly errors surface from kernel(), not the parser.
  RunConfig finite_empty;
  finite_empty.kernel_mode = "finite";
  CHECK_THROWS_WITH(finite_empty.kernel(), ContainsSubstring("kernel.component"));
  RunConfig cont_incomplete;
  cont_incomplete.kernel_mode = "continuum";
  CHECK_THROWS_AS(cont_incomplete.kernel(), std::invalid_argument);
  RunConfig no_mode;
  CHECK_THROWS_AS(no_mode.kernel(), std::invalid_argument);

  CHECK_THROWS_AS(command_from_name("explode"), std::invalid_argument);
  CHECK(std::string(command_name(Command::Decompose)) == "decompose");
  CHECK(command_from_name("register") == Command::Register);
}

TEST_CASE("emitted files carry the provenance header", "[io]") {
  CHECK(csv_header(42, "register") == "# msdiffeo v0.1.0 seed=42 cmd=register");
  CHECK(csv_header(0, "verify") == "# msdiffeo v0.1.0 seed=0 cmd=verify");
}

TEST_CASE("grid fields round-trip bitwise through CSV", "[io]") {
  TempDir tmp;
  const Grid2 g{5, 4, 0.2, 0.1, -0.3};
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  VectorField vf(g);
  for (Vec2& v : vf.values) v = {u(rng), u(rng)};
  write_vector_field(tmp.path / "vf.csv", vf, csv_header(1, "verify"));
  const VectorField vback = read_vector_field(tmp.path / "vf.csv");
  CHECK(vback.grid.nx == g.nx);
  CHECK(vback.grid.ny == g.ny);
  CHECK(vback.grid.h == g.h);
  CHECK(vback.grid.ox == g.ox);
  CHECK(vback.grid.oy == g.oy);
  for (std::size_t q = 0; q < vf.values.size(); ++q) {
    CHECK(vback.values[q].x == vf.values[q].x);
    CHECK(vback.values[q].y == vf.values[q].y);
  }

  ScalarField sf(g);
  for (double& v : sf.values) v = u(rng);
  write_scalar_field(tmp.path / "sf.csv", sf, csv_header(1, "verify"));
  const ScalarField sback = read_scalar_field(tmp.path / "sf.csv");
  CHECK(sback.grid.h == g.h);
  CHECK(sback.values == sf.values);

  // Without a grid comment the reader infers dimensions and unit spacing.
  {
    std::ofstream out(tmp.path / "bare.csv");
    out << "i,j,vx,vy\n";
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) out << i << ',' << j << ",0.5,0.25\n";
  }
  const VectorField bare = read_vector_field(tmp.path / "bare.csv");
  CHECK(bare.grid.nx == 2);
  CHECK(bare.grid.ny == 2);
  CHECK(bare.grid.h == 1.0);

  // Structural errors: missing rows, short rows, missing header.
  {
    std::ofstream out(tmp.path / "short.csv");
    out << "i,j,vx,vy\n0,0,1.0\n";
  }
  CHECK_THROWS_WITH(read_vector_field(tmp.path / "short.csv"),
                    ContainsSubstring("short row"));
  {
    std::ofstream out(tmp.path / "counts.csv");
    out << detail::grid_comment(g) << "\ni,j,vx,vy\n0,0,1.0,2.0\n";
  }
  CHECK_THROWS_WITH(read_vector_field(tmp.path / "counts.csv"),
                    ContainsSubstring("row count does not match"));
  {
    std::ofstream out(tmp.path / "empty.csv");
    out << "# only a comment\n";
  }
  CHECK_THROWS_WITH(read_vector_field(tmp.path / "empty.csv"),
                    ContainsSubstring("missing column header"));
  CHECK_THROWS_AS(read_vector_field(tmp.path / "absent.csv"), std::invalid_argument);
}

TEST_CASE("landmarks, maps, and controls round-trip bitwise", "[io]") {
  TempDir tmp;
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  LandmarkSet lm({3, 1, 4}, {{0.25, 0.5}, {u(rng), u(rng)}, {0.125, -0.75}});
  write_landmarks(tmp.path / "lm.csv", lm, csv_header(2, "register"));
  const LandmarkSet lback = read_landmarks(tmp.path / "lm.csv");
  CHECK(lback.ids == lm.ids);
  REQUIRE(lback.size() == lm.size());
  for (std::size_t a = 0; a < lm.size(); ++a) {
    CHECK(lback.points[a].x == lm.points[a].x);
    CHECK(lback.points[a].y == lm.points[a].y);
  }
  {
    std::ofstream out(tmp.path / "lm_empty.csv");
    out << "id,x,y\n";
  }
  CHECK_THROWS_WITH(read_landmarks(tmp.path / "lm_empty.csv"),
                    ContainsSubstring("no landmarks"));

  const Grid2 g{4, 4, 1.0 / 3.0};
  Diffeomorphism d(g);
  for (Vec2& p : d.map) p += Vec2{0.01 * u(rng), 0.01 * u(rng)};
  write_diffeomorphism(tmp.path / "map_fwd.csv", d, csv_header(2, "register"));
  const Diffeomorphism dback = read_diffeomorphism(tmp.path / "map_fwd.csv");
  CHECK_FALSE(dback.has_inverse());
  for (std::size_t q = 0; q < d.map.size(); ++q) {
    CHECK(dback.map[q].x == d.map[q].x);
    CHECK(dback.map[q].y == d.map[q].y);
  }

  d.inv = d.map;
  for (Vec2& p : d.inv) p = {-p.x, -p.y};
  write_diffeomorphism(tmp.path / "map_inv.csv", d, csv_header(2, "register"));
  const Diffeomorphism iback = read_diffeomorphism(tmp.path / "map_inv.csv");
  REQUIRE(iback.has_inverse());
  for (std::size_t q = 0; q < d.map.size(); ++q) {
    CHECK(iback.inv[q].x == d.inv[q].x);
    CHECK(iback.inv[q].y == d.inv[q].y);
  }

  Control c = Control::zeros(3, 2, 4);
  for (std::size_t k = 0; k < c.n_coords(); ++k) c.coord(k) = u(rng);
  write_control(tmp.path / "control.csv", c, csv_header(2, "register"));
  const Control cback = read_control(tmp.path / "control.csv");
  CHECK(cback.time_steps == c.time_steps);
  CHECK(cback.n_slots == c.n_slots);
  CHECK(cback.n_points == c.n_points);
  for (std::size_t q = 0; q < c.p.size(); ++q) {
    CHECK(cback.p[q].x == c.p[q].x);
    CHECK(cback.p[q].y == c.p[q].y);
  }
  {
    std::ofstream out(tmp.path / "control_bad.csv");
    out << "m,slot,point,px,py\n0,0,0,0.1,0.2\n";
  }
  CHECK_THROWS_WITH(read_control(tmp.path / "control_bad.csv"),
                    ContainsSubstring("missing '# control ...' shape line"));

  std::vector<IterRecord> hist{{0, 5.0, 1.0, 4.0, 0.0, 2.0}, {1, 3.0, 1.5, 1.5, 0.5, 1.0}};
  write_energy_log(tmp.path / "energy.csv", hist, csv_header(2, "register"));
  const std::string log = slurp(tmp.path / "energy.csv");
  CHECK(log.find("iter,total,reg,data,step,grad_norm\n") != std::string::npos);
  CHECK(log.find("\n1,3,1.5,1.5,0.5,1\n") != std::string::npos);

  // Flow path directories lay one field per time node.
  const std::vector<double> times{0.0, 1.0};
  FlowPath fp(g, times, std::vector<VectorField>(2, VectorField(g)));
  write_flow_path(tmp.path / "flow", fp, csv_header(2, "register"));
  CHECK(fs::exists(tmp.path / "flow" / "vel_t0.csv"));
  CHECK(fs::exists(tmp.path / "flow" / "vel_t1.csv"));
  CHECK(flow_file_name(3, 1) == "vel_t3_s1.csv");
}

TEST_CASE("PGM images quantize on write and normalize on read", "[io]") {
  TempDir tmp;
  const Grid2 g{6, 5, 0.2};
  ScalarField f(g);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) f.at(i, j) = static_cast<double>(i + j * g.nx) / 29.0;

  write_pgm(tmp.path / "img.pgm", f);
  const ScalarField back = read_pgm(tmp.path / "img.pgm");
  CHECK(back.grid.nx == 6);
  CHECK(back.grid.ny == 5);
  CHECK(back.grid.h == 0.2);  // 1/(max(6,5)-1)
  double worst = 0.0;
  for (std::size_t q = 0; q < f.values.size(); ++q)
    worst = std::max(worst, std::abs(back.values[q] - f.values[q]));
  CHECK(worst <= 0.5 / 255.0 + 1e-12);

  // Exact grid levels k/maxval survive the round trip bitwise.
  ScalarField lv(g);
  for (std::size_t q = 0; q < lv.values.size(); ++q)
    lv.values[q] = static_cast<double>(q % 256) / 255.0;
  write_pgm(tmp.path / "levels.pgm", lv);
  CHECK(read_pgm(tmp.path / "levels.pgm").values == lv.values);

  // Out-of-range data clamps instead of wrapping.
  ScalarField hot(g);
  for (double& v : hot.values) v = 2.0;
  write_pgm(tmp.path / "hot.pgm", hot);
  for (double v : read_pgm(tmp.path / "hot.pgm").values) CHECK(v == 1.0);

  CHECK_THROWS_AS(write_pgm(tmp.path / "bad.pgm", f, 0), std::invalid_argument);
  CHECK_THROWS_AS(write_pgm(tmp.path / "bad.pgm", f, 70000), std::invalid_argument);

  auto write_text = [&](const std::string& name, const std::string& body) {
    std::ofstream out(tmp.path / name);
    out << body;
    return tmp.path / name;
  };
  CHECK_THROWS_WITH(read_pgm(write_text("p5.pgm", "P5\n2 2\n255\n")),
                    ContainsSubstring("not an ASCII PGM"));
  CHECK_THROWS_WITH(read_pgm(write_text("trunc.pgm", "P2\n2 2\n")),
                    ContainsSubstring("truncated PGM header"));
  CHECK_THROWS_WITH(read_pgm(write_text("count.pgm", "P2\n2 2\n255\n1 2 3\n")),
                    ContainsSubstring("pixel count mismatch"));
  CHECK_THROWS_WITH(read_pgm(write_text("range.pgm", "P2\n2 2\n255\n1 2 3 300\n")),
                    ContainsSubstring("value out of range"));
  CHECK_THROWS_WITH(read_pgm(write_text("dims.pgm", "P2\n1 2\n255\n1 2\n")),
                    ContainsSubstring("bad PGM dimensions"));

  // Comments in the stream are stripped before tokenizing.
  const ScalarField commented =
      read_pgm(write_text("note.pgm", "P2 # format\n2 2 # dims\n4\n0 1\n2 # half\n4\n"));
  CHECK(commented.at(1, 1) == 1.0);

  // Extension dispatch: .pgm goes through the PGM reader, CSV otherwise.
  write_scalar_field(tmp.path / "img.csv", f, csv_header(3, "register"));
  CHECK(read_image(tmp.path / "img.csv").values == f.values);
  CHECK(read_image(tmp.path / "img.pgm").values == back.values);
}
