#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace {

const std::string kCli = VIF_CLI_PATH;

std::string dir() { return ::testing::TempDir(); }

int run(const std::string& args) {
    const int status = std::system((kCli + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(run("--help"), 0);
    EXPECT_EQ(run("train --help"), 0);
    EXPECT_EQ(run(""), 1);
    EXPECT_EQ(run("frobnicate"), 1);
    EXPECT_EQ(run("gen --out " + dir() + "x.txt --no-such-flag"), 1);
    EXPECT_EQ(run("gen"), 1);
    EXPECT_EQ(run("train --data " + dir() + "missing.txt --out " + dir() + "m.ckpt"), 2);
    EXPECT_EQ(run("gen --n 3 --ambiguity 2 --out " + dir() + "bad.txt"), 2);
}

TEST(Cli, RenderMapOfFreshModelIsCentrallySymmetric) {
    const std::string pgm = dir() + "fresh.pgm";
    ASSERT_EQ(run("render-map --out " + pgm), 0);
    const std::string bytes = slurp(pgm);
    const std::string header = "P5\n8 8\n255\n";
    ASSERT_EQ(bytes.substr(0, header.size()), header);
    ASSERT_EQ(bytes.size(), header.size() + 64);
    auto px = [&](int r, int c) { return static_cast<unsigned char>(bytes[header.size() + r * 8 + c]); };
    int top = 0;
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
            EXPECT_EQ(px(r, c), px(7 - r, c));
            EXPECT_EQ(px(r, c), px(r, 7 - c));
            EXPECT_EQ(px(r, c), px(c, r));
            top = std::max(top, static_cast<int>(px(r, c)));
        }
    EXPECT_EQ(top, 255);
    EXPECT_EQ(px(3, 3), 255);
}

TEST(Cli, GenTrainEvalDumpAnalyze) {
    const std::string d = dir();
    const std::string cfg = d + "small.cfg";
    {
        std::ofstream c(cfg);
        c << "# tiny model\nlayers=4\nd-model=16\nheads=2\nlatent-dim=4\ncomponents=4\n";
    }
    ASSERT_EQ(run("gen --n 40 --seed 3 --out " + d + "tr.txt --heldout " + d + "ho.txt --heldout-n 10"), 0);
    ASSERT_EQ(run("train --config " + cfg + " --data " + d + "tr.txt --steps 3 --batch 2 --out " + d +
                  "m.ckpt --log " + d + "log.csv"),
              0);
    const std::string log = slurp(d + "log.csv");
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);
    ASSERT_EQ(run("eval --ckpt " + d + "m.ckpt --data " + d + "ho.txt --out " + d + "ev.csv"), 0);
    EXPECT_EQ(slurp(d + "ev.csv").rfind("instances,10\n", 0), 0u);
    // Training data is rejected as held-out.
    EXPECT_EQ(run("eval --ckpt " + d + "m.ckpt --data " + d + "tr.txt"), 2);
    ASSERT_EQ(run("dump-attn --ckpt " + d + "m.ckpt --data " + d + "ho.txt --out " + d + "a.dump"), 0);
    ASSERT_EQ(run("analyze --dump " + d + "a.dump --out " + d + "prof.csv"), 0);
    const std::string prof = slurp(d + "prof.csv");
    EXPECT_EQ(std::count(prof.begin(), prof.end(), '\n'), 5);
    EXPECT_EQ(run("analyze --dump " + d + "a.dump --scope nope"), 1);
}

TEST(Cli, GradcheckPasses) { EXPECT_EQ(run("gradcheck --seeds 5 --out " + dir() + "gc.csv"), 0); }
