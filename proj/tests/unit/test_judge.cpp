#include <doctest.h>

#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>

#include "steerkit/errors.hpp"
#include "steerkit/judge.hpp"
#include "support.hpp"

using namespace steerkit;

namespace {

FeatureCandidate candidate(std::string explanation, std::vector<std::string> tokens = {}) {
    FeatureCandidate c;
    c.feature_id = 42;
    c.explanation = std::move(explanation);
    c.top_tokens = std::move(tokens);
    return c;
}

}  // namespace

TEST_CASE("rule judge matches taxonomy keywords at word starts") {
    const auto set = test::counting_set();
    RuleBasedJudge judge;
    CHECK(judge.accepts(candidate("Numbers and quantities of objects"), set));
    CHECK(judge.accepts(candidate("tokens about counting"), set));
    CHECK(judge.accepts(candidate("misc", {"How many"}), set));
    CHECK_FALSE(judge.accepts(candidate("colors of fruit", {"red", "green"}), set));
    // "account" contains "count" but not at a word start.
    CHECK_FALSE(judge.accepts(candidate("bank account details"), set));
}

TEST_CASE("rule judge uses keywords from the concept file when present") {
    auto set = test::counting_set();
    set.keywords = {"apple"};
    RuleBasedJudge judge;
    CHECK(judge.accepts(candidate("Apples in baskets"), set));
    CHECK_FALSE(judge.accepts(candidate("numbers"), set));
}

TEST_CASE("verdict parsing") {
    CHECK(parse_verdict("YES, it tracks counts") == true);
    CHECK(parse_verdict("  no. unrelated") == false);
    CHECK(parse_verdict("**Yes** because") == true);
    CHECK(parse_verdict("No") == false);
    CHECK_FALSE(parse_verdict("Answer: YES").has_value());
    CHECK_FALSE(parse_verdict("Yesterday").has_value());
    CHECK_FALSE(parse_verdict("nothing").has_value());
    CHECK_FALSE(parse_verdict("").has_value());
}

TEST_CASE("verification prompt carries the definition, tokens and examples") {
    const auto set = test::counting_set();
    const auto prompt = render_verification_prompt(candidate("counts of things", {"three", "two", "five", "four", "seven", "six"}),
                                                   set, {{"numbers", "There are <top>two</top> cats"}});
    CHECK(prompt.find("taxonomy \"counting\"") != std::string::npos);
    CHECK(prompt.find(set.definition) != std::string::npos);
    CHECK(prompt.find("1. Feature's explanation: counts of things") != std::string::npos);
    CHECK(prompt.find("<top>three</top>") != std::string::npos);
    CHECK(prompt.find("5. <top>seven</top>") != std::string::npos);
    CHECK(prompt.find("<top>six</top>") == std::string::npos);
    CHECK(prompt.find("Example 1:") != std::string::npos);
    CHECK(prompt.find("start with YES or NO") != std::string::npos);
}

TEST_CASE("LLM judge maps replies and wraps failures with the feature id") {
    const auto set = test::counting_set();
    std::string seen;
    LlmJudge yes([&](const std::string& p) {
        seen = p;
        return std::string("YES - counts");
    });
    CHECK(yes.accepts(candidate("counting"), set));
    CHECK(seen.find("counting") != std::string::npos);

    LlmJudge no([](const std::string&) { return std::string("NO"); });
    CHECK_FALSE(no.accepts(candidate("x"), set));

    LlmJudge garbled([](const std::string&) { return std::string("Maybe?"); });
    try {
        garbled.accepts(candidate("x"), set);
        FAIL("expected error");
    } catch (const JudgeError& e) {
        CHECK(e.feature_id() == 42);
    }
    LlmJudge broken([](const std::string&) -> std::string { throw std::runtime_error("connection refused"); });
    CHECK_THROWS_AS(broken.accepts(candidate("x"), set), JudgeError);
}

TEST_CASE("chat-completions client against a local endpoint") {
    httplib::Server server;
    std::string auth, model, content;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        auth = req.get_header_value("Authorization");
        const auto body = nlohmann::json::parse(req.body);
        model = body["model"];
        content = body["messages"][0]["content"];
        const nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "YES, numbers"}}}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    server.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpChatCompletion client;
    client.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
    client.api_key = "secret";
    client.timeout = std::chrono::seconds(5);
    CHECK(client("hello judge") == "YES, numbers");
    CHECK(auth == "Bearer secret");
    CHECK(model == "o3-mini");
    CHECK(content == "hello judge");

    LlmJudge judge(client);
    CHECK(judge.accepts(candidate("numbers"), test::counting_set()));

    HttpChatCompletion bad = client;
    bad.url = "http://127.0.0.1:" + std::to_string(port) + "/broken";
    CHECK_THROWS_AS(bad("x"), Error);
    bad.url = "127.0.0.1/no-scheme";
    CHECK_THROWS_AS(bad("x"), ConfigError);

    server.stop();
    t.join();
}
