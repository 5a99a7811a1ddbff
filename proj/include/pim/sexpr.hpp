#pragma once

// Program representation: the S-expression AST, its text form, and the
// structural queries/edits the structure search is built on.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "pim/vec.hpp"

namespace pim {

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t position)
        : Error("parse error at " + std::to_string(position) + ": " + what)
        , position_(position)
    {
    }
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

/// Child-index path from a body expression down to a node. The first entry
/// indexes the program body.
using Path = std::vector<std::size_t>;

inline std::string to_string(const Path& path)
{
    std::string s = "/";
    for (std::size_t i = 0; i < path.size(); ++i) {
        if (i) s += '/';
        s += std::to_string(path[i]);
    }
    return s;
}

class TypeError : public Error {
public:
    TypeError(const std::string& what, Path path)
        : Error("type error at " + to_string(path) + ": " + what)
        , path_(std::move(path))
    {
    }
    const Path& path() const noexcept { return path_; }

private:
    Path path_;
};

enum class ExecPolicy {
    RepeatBody, ///< re-run the body until the observation trace is exhausted
    SinglePass, ///< run the body once; its actions are the whole execution trace
};

inline std::string to_string(ExecPolicy p) { return p == ExecPolicy::RepeatBody ? "repeat" : "single"; }

inline ExecPolicy parse_exec_policy(std::string_view s)
{
    if (s == "repeat" || s == "RepeatBody") return ExecPolicy::RepeatBody;
    if (s == "single" || s == "SinglePass") return ExecPolicy::SinglePass;
    throw Error("unknown exec policy '" + std::string(s) + "'");
}

/// Variable and action signatures of an observed system. Ordered maps give
/// lexicographic iteration, which several tie-breaks rely on.
struct Schema {
    std::map<std::string, std::size_t> variables;
    std::map<std::string, std::size_t> actions;

    bool operator==(const Schema&) const = default;

    /// RepeatBody when the system has a single action id, SinglePass otherwise.
    ExecPolicy default_policy() const
    {
        return actions.size() == 1 ? ExecPolicy::RepeatBody : ExecPolicy::SinglePass;
    }

    std::vector<std::string> variables_of_dim(std::size_t dim) const
    {
        std::vector<std::string> out;
        for (const auto& [id, d] : variables)
            if (d == dim) out.push_back(id);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Function library
// ---------------------------------------------------------------------------

/// One arithmetic instruction. Argument dimensions are derived top-down from
/// the required output dimension, which lets parsing and expansion infer the
/// dimension of fresh parameters.
struct FunctionSpec {
    std::string id;
    std::string symbol;
    std::size_t arity = 0;
    std::function<std::optional<std::vector<std::size_t>>(std::size_t out_dim)> arg_dims;
    std::function<bool(std::size_t out_dim)> commutes;
    std::function<Vec(std::span<const Vec> args)> eval;
    /// Vector-Jacobian product: upstream^T * d(out)/d(args[which]).
    std::function<Vec(std::span<const Vec> args, const Vec& upstream, std::size_t which)> vjp;
};

class FunctionLibrary {
public:
    void add(FunctionSpec f) { entries_.push_back(std::move(f)); }

    const FunctionSpec* find(std::string_view name) const
    {
        for (const auto& f : entries_)
            if (f.id == name || f.symbol == name) return &f;
        return nullptr;
    }

    const FunctionSpec& at(std::string_view name) const
    {
        if (const auto* f = find(name)) return *f;
        throw Error("unknown function '" + std::string(name) + "'");
    }

    const std::vector<FunctionSpec>& entries() const noexcept { return entries_; }

    std::size_t max_arity() const
    {
        std::size_t n = 0;
        for (const auto& f : entries_) n = std::max(n, f.arity);
        return n;
    }

    /// vector add, vector subtract, scalar scale. One shared instance.
    static const FunctionLibrary& standard()
    {
        static const FunctionLibrary instance = make_standard();
        return instance;
    }

private:
    static FunctionLibrary make_standard()
    {
        FunctionLibrary lib;
        lib.add({
            .id = "add",
            .symbol = "+",
            .arity = 2,
            .arg_dims = [](std::size_t d) { return std::optional(std::vector<std::size_t>{d, d}); },
            .commutes = [](std::size_t) { return true; },
            .eval = [](std::span<const Vec> a) { return vec::add(a[0], a[1]); },
            .vjp = [](std::span<const Vec>, const Vec& g, std::size_t) { return g; },
        });
        lib.add({
            .id = "sub",
            .symbol = "-",
            .arity = 2,
            .arg_dims = [](std::size_t d) { return std::optional(std::vector<std::size_t>{d, d}); },
            .commutes = [](std::size_t) { return false; },
            .eval = [](std::span<const Vec> a) { return vec::sub(a[0], a[1]); },
            .vjp = [](std::span<const Vec>, const Vec& g, std::size_t which) {
                return which == 0 ? g : vec::scale(-1.0, g);
            },
        });
        // (* c v): c is a scalar, v any dimension.
        lib.add({
            .id = "scale",
            .symbol = "*",
            .arity = 2,
            .arg_dims = [](std::size_t d) { return std::optional(std::vector<std::size_t>{1, d}); },
            .commutes = [](std::size_t d) { return d == 1; },
            .eval = [](std::span<const Vec> a) { return vec::scale(a[0].at(0), a[1]); },
            .vjp = [](std::span<const Vec> a, const Vec& g, std::size_t which) {
                if (which == 0) return Vec{vec::dot(g, a[1])};
                return vec::scale(a[0].at(0), g);
            },
        });
        return lib;
    }

    std::vector<FunctionSpec> entries_;
};

// ---------------------------------------------------------------------------
// Expressions and programs
// ---------------------------------------------------------------------------

enum class ExprKind { Action, Call, Var, Param, Const };

struct Expr {
    ExprKind kind = ExprKind::Const;
    std::string name; ///< action, function, variable or parameter id
    std::size_t dim = 1;
    Vec value; ///< Const only
    std::vector<Expr> args;

    bool operator==(const Expr&) const = default;

    bool is_leaf() const noexcept
    {
        return kind == ExprKind::Var || kind == ExprKind::Param || kind == ExprKind::Const;
    }

    static Expr action(std::string id, Expr arg)
    {
        Expr e;
        e.kind = ExprKind::Action;
        e.name = std::move(id);
        e.dim = arg.dim;
        e.args.push_back(std::move(arg));
        return e;
    }
    static Expr call(std::string id, std::size_t dim, std::vector<Expr> args)
    {
        Expr e;
        e.kind = ExprKind::Call;
        e.name = std::move(id);
        e.dim = dim;
        e.args = std::move(args);
        return e;
    }
    static Expr var(std::string id, std::size_t dim)
    {
        Expr e;
        e.kind = ExprKind::Var;
        e.name = std::move(id);
        e.dim = dim;
        return e;
    }
    static Expr param(std::string id, std::size_t dim)
    {
        Expr e;
        e.kind = ExprKind::Param;
        e.name = std::move(id);
        e.dim = dim;
        return e;
    }
    static Expr constant(Vec v)
    {
        Expr e;
        e.kind = ExprKind::Const;
        e.dim = v.size();
        e.value = std::move(v);
        return e;
    }
};

struct Program {
    std::vector<Expr> body;
    std::map<std::string, Vec> params;
    ExecPolicy policy = ExecPolicy::RepeatBody;

    bool operator==(const Program&) const = default;
    bool empty() const noexcept { return body.empty(); }
};

// ---------------------------------------------------------------------------
// Text form
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_number(double x)
{
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline std::string format_vec(const Vec& v)
{
    if (v.size() == 1) return format_number(v[0]);
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ' ';
        s += format_number(v[i]);
    }
    return s + "]";
}

inline void print_expr(const Expr& e, const FunctionLibrary& lib, const std::map<std::string, Vec>* values,
                       std::string& out)
{
    switch (e.kind) {
    case ExprKind::Var: out += e.name; return;
    case ExprKind::Param:
        if (values) {
            if (auto it = values->find(e.name); it != values->end()) {
                out += format_vec(it->second);
                return;
            }
        }
        out += e.name;
        return;
    case ExprKind::Const: out += format_vec(e.value); return;
    case ExprKind::Action:
    case ExprKind::Call: {
        out += '(';
        if (e.kind == ExprKind::Call) {
            const auto* f = lib.find(e.name);
            out += f ? f->symbol : e.name;
        } else {
            out += e.name;
        }
        for (const auto& a : e.args) {
            out += ' ';
            print_expr(a, lib, values, out);
        }
        out += ')';
        return;
    }
    }
}

inline std::string print_body(const Program& p, const FunctionLibrary& lib, const std::map<std::string, Vec>* values)
{
    if (p.body.empty()) return "(do)";
    std::string out;
    if (p.body.size() == 1) {
        print_expr(p.body.front(), lib, values, out);
        return out;
    }
    out += "(do";
    for (const auto& e : p.body) {
        out += ' ';
        print_expr(e, lib, values, out);
    }
    out += ')';
    return out;
}

} // namespace detail

/// Structure form: parameters appear by name.
inline std::string print(const Program& p, const FunctionLibrary& lib = FunctionLibrary::standard())
{
    return detail::print_body(p, lib, nullptr);
}

/// Value form: parameters are substituted by their current values, so the
/// text is directly executable.
inline std::string print_with_values(const Program& p, const FunctionLibrary& lib = FunctionLibrary::standard())
{
    return detail::print_body(p, lib, &p.params);
}

inline std::string print(const Expr& e, const FunctionLibrary& lib = FunctionLibrary::standard())
{
    std::string out;
    detail::print_expr(e, lib, nullptr, out);
    return out;
}

namespace detail {

struct Token {
    enum Kind { LParen, RParen, LBracket, RBracket, Atom, End } kind;
    std::string text;
    std::size_t pos;
};

class Lexer {
public:
    explicit Lexer(std::string_view text)
        : text_(text)
    {
    }

    Token next()
    {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
        if (pos_ >= text_.size()) return {Token::End, {}, pos_};
        const std::size_t start = pos_;
        switch (text_[pos_]) {
        case '(': ++pos_; return {Token::LParen, "(", start};
        case ')': ++pos_; return {Token::RParen, ")", start};
        case '[': ++pos_; return {Token::LBracket, "[", start};
        case ']': ++pos_; return {Token::RBracket, "]", start};
        default: break;
        }
        while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_]))
               && std::string_view("()[]").find(text_[pos_]) == std::string_view::npos)
            ++pos_;
        return {Token::Atom, std::string(text_.substr(start, pos_ - start)), start};
    }

private:
    std::string_view text_;
    std::size_t pos_ = 0;
};

inline std::optional<double> parse_number(std::string_view s)
{
    if (s.empty()) return std::nullopt;
    const char c = s.front();
    if (!(std::isdigit(static_cast<unsigned char>(c)) || c == '.'
          || ((c == '-' || c == '+') && s.size() > 1)))
        return std::nullopt;
    if (c == '+') s.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

class Parser {
public:
    Parser(std::string_view text, const Schema& schema, const FunctionLibrary& lib)
        : lex_(text)
        , schema_(schema)
        , lib_(lib)
    {
        advance();
    }

    Program parse_program()
    {
        Program p;
        p.policy = schema_.default_policy();
        if (cur_.kind != Token::LParen) throw ParseError("expected '('", cur_.pos);
        // Peek at the head to distinguish (do ...) from a single action.
        const Token open = cur_;
        advance();
        if (cur_.kind == Token::Atom && cur_.text == "do") {
            advance();
            while (cur_.kind != Token::RParen) {
                if (cur_.kind == Token::End) throw ParseError("unterminated (do ...)", open.pos);
                path_ = {p.body.size()};
                p.body.push_back(parse_action());
            }
            advance();
        } else {
            path_ = {0};
            p.body.push_back(parse_action_after_open(open));
        }
        if (cur_.kind != Token::End) throw ParseError("trailing input", cur_.pos);
        p.params = std::move(params_);
        return p;
    }

private:
    void advance() { cur_ = lex_.next(); }

    Expr parse_action()
    {
        if (cur_.kind != Token::LParen) throw ParseError("expected action call", cur_.pos);
        const Token open = cur_;
        advance();
        return parse_action_after_open(open);
    }

    Expr parse_action_after_open(const Token& open)
    {
        if (cur_.kind != Token::Atom) throw ParseError("expected action name", cur_.pos);
        auto it = schema_.actions.find(cur_.text);
        if (it == schema_.actions.end()) throw ParseError("unknown action '" + cur_.text + "'", cur_.pos);
        const std::string name = cur_.text;
        advance();
        path_.push_back(0);
        Expr arg = parse_expr(it->second);
        path_.pop_back();
        if (cur_.kind != Token::RParen) throw ParseError("action takes exactly one argument", cur_.pos);
        advance();
        (void)open;
        return Expr::action(name, std::move(arg));
    }

    Expr parse_expr(std::size_t dim)
    {
        switch (cur_.kind) {
        case Token::LBracket: return parse_vector(dim);
        case Token::LParen: return parse_call(dim);
        case Token::Atom: return parse_atom(dim);
        case Token::End: throw ParseError("unexpected end of input", cur_.pos);
        default: throw ParseError("unexpected '" + cur_.text + "'", cur_.pos);
        }
    }

    Expr parse_vector(std::size_t dim)
    {
        const std::size_t start = cur_.pos;
        advance();
        Vec v;
        while (cur_.kind == Token::Atom) {
            auto x = parse_number(cur_.text);
            if (!x) throw ParseError("expected number in vector literal", cur_.pos);
            v.push_back(*x);
            advance();
        }
        if (cur_.kind != Token::RBracket) throw ParseError("expected ']'", cur_.pos);
        advance();
        if (v.empty()) throw ParseError("empty vector literal", start);
        if (v.size() != dim)
            throw TypeError("vector literal of dim " + std::to_string(v.size()) + " where dim "
                                + std::to_string(dim) + " is required",
                            path_);
        return Expr::constant(std::move(v));
    }

    Expr parse_call(std::size_t dim)
    {
        advance();
        if (cur_.kind != Token::Atom) throw ParseError("expected function name", cur_.pos);
        if (schema_.actions.count(cur_.text))
            throw TypeError("action '" + cur_.text + "' used as a value", path_);
        const FunctionSpec* f = lib_.find(cur_.text);
        if (!f) throw ParseError("unknown function '" + cur_.text + "'", cur_.pos);
        advance();
        auto dims = f->arg_dims(dim);
        if (!dims) throw TypeError("'" + f->id + "' cannot produce dim " + std::to_string(dim), path_);
        std::vector<Expr> args;
        for (std::size_t i = 0; i < f->arity; ++i) {
            if (cur_.kind == Token::RParen)
                throw TypeError("'" + f->id + "' expects " + std::to_string(f->arity) + " arguments", path_);
            path_.push_back(i);
            args.push_back(parse_expr((*dims)[i]));
            path_.pop_back();
        }
        if (cur_.kind != Token::RParen)
            throw TypeError("'" + f->id + "' expects " + std::to_string(f->arity) + " arguments", path_);
        advance();
        return Expr::call(f->id, dim, std::move(args));
    }

    Expr parse_atom(std::size_t dim)
    {
        const Token tok = cur_;
        advance();
        if (auto x = parse_number(tok.text)) {
            if (dim != 1)
                throw TypeError("scalar literal where dim " + std::to_string(dim) + " is required", path_);
            return Expr::constant({*x});
        }
        if (auto it = schema_.variables.find(tok.text); it != schema_.variables.end()) {
            if (it->second != dim)
                throw TypeError("variable '" + tok.text + "' has dim " + std::to_string(it->second)
                                    + ", dim " + std::to_string(dim) + " is required",
                                path_);
            return Expr::var(tok.text, dim);
        }
        if (schema_.actions.count(tok.text) || lib_.find(tok.text) || tok.text == "do")
            throw ParseError("'" + tok.text + "' cannot be used as a leaf", tok.pos);
        if (!is_identifier(tok.text)) throw ParseError("unknown identifier '" + tok.text + "'", tok.pos);
        // Anything else is a free parameter; its dim comes from the position.
        auto [it, inserted] = params_.try_emplace(tok.text, Vec(dim, 0.0));
        if (!inserted && it->second.size() != dim)
            throw TypeError("parameter '" + tok.text + "' used with conflicting dims", path_);
        return Expr::param(tok.text, dim);
    }

    static bool is_identifier(std::string_view s)
    {
        if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
        return std::all_of(s.begin(), s.end(), [](char c) {
            return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.' || c == '~';
        });
    }

    Lexer lex_;
    Token cur_{Token::End, {}, 0};
    const Schema& schema_;
    const FunctionLibrary& lib_;
    std::map<std::string, Vec> params_;
    Path path_;
};

} // namespace detail

/// Parses and typechecks a program. Identifiers that are not variables,
/// actions or functions become parameters (initialised to zero). `(do ...)`
/// wraps a multi-action body.
inline Program parse(std::string_view text, const Schema& schema,
                     const FunctionLibrary& lib = FunctionLibrary::standard())
{
    if (auto trimmed = text.find_first_not_of(" \t\r\n"); trimmed != std::string_view::npos) {
        std::string_view rest = text.substr(trimmed);
        if (rest.starts_with("(do)")) {
            if (rest.substr(4).find_first_not_of(" \t\r\n") != std::string_view::npos)
                throw ParseError("trailing input", trimmed + 4);
            Program p;
            p.policy = schema.default_policy();
            return p;
        }
    }
    detail::Parser parser(text, schema, lib);
    return parser.parse_program();
}

// ---------------------------------------------------------------------------
// Structural queries
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t height(const Expr& e)
{
    std::size_t h = 0;
    for (const auto& a : e.args) h = std::max(h, 1 + height(a));
    return h;
}

} // namespace detail

/// Edge count of the longest root-to-leaf path, each body action being a root.
inline std::size_t depth(const Program& p)
{
    std::size_t d = 0;
    for (const auto& e : p.body) d = std::max(d, detail::height(e));
    return d;
}

struct Leaf {
    Path path;
    Expr expr;
    bool body_slot = false; ///< pseudo-leaf where a new action can be appended
};

/// Whether the program exposes a trailing body slot. The empty program always
/// does; non-empty programs only under SinglePass, where bodies are sequences.
inline bool has_body_slot(const Program& p)
{
    return p.body.empty() || p.policy == ExecPolicy::SinglePass;
}

namespace detail {

inline void collect_leaves(const Expr& e, Path& path, std::vector<Leaf>& out)
{
    if (e.is_leaf()) {
        out.push_back({path, e, false});
        return;
    }
    for (std::size_t i = 0; i < e.args.size(); ++i) {
        path.push_back(i);
        collect_leaves(e.args[i], path, out);
        path.pop_back();
    }
}

inline const Expr* node_at(const std::vector<Expr>& body, const Path& path)
{
    if (path.empty() || path[0] >= body.size()) return nullptr;
    const Expr* e = &body[path[0]];
    for (std::size_t i = 1; i < path.size(); ++i) {
        if (path[i] >= e->args.size()) return nullptr;
        e = &e->args[path[i]];
    }
    return e;
}

inline Expr* node_at(std::vector<Expr>& body, const Path& path)
{
    return const_cast<Expr*>(node_at(static_cast<const std::vector<Expr>&>(body), path));
}

inline void collect_param_names(const Expr& e, std::vector<std::string>& out)
{
    if (e.kind == ExprKind::Param) {
        if (std::find(out.begin(), out.end(), e.name) == out.end()) out.push_back(e.name);
        return;
    }
    for (const auto& a : e.args) collect_param_names(a, out);
}

} // namespace detail

/// All value leaves in depth-first order, followed by the body slot when the
/// program has one.
inline std::vector<Leaf> leaves(const Program& p)
{
    std::vector<Leaf> out;
    Path path;
    for (std::size_t i = 0; i < p.body.size(); ++i) {
        path.assign(1, i);
        detail::collect_leaves(p.body[i], path, out);
    }
    if (has_body_slot(p)) out.push_back({Path{p.body.size()}, Expr{}, true});
    return out;
}

inline const Expr* node_at(const Program& p, const Path& path) { return detail::node_at(p.body, path); }

/// Parameter ids in first-use order.
inline std::vector<std::string> param_names(const Program& p)
{
    std::vector<std::string> out;
    for (const auto& e : p.body) detail::collect_param_names(e, out);
    return out;
}

/// Returns the first offending node, or nullopt when the program is well typed.
inline std::optional<TypeError> typecheck(const Program& p, const Schema& schema,
                                          const FunctionLibrary& lib = FunctionLibrary::standard())
{
    std::optional<TypeError> err;
    Path path;
    std::function<void(const Expr&, std::size_t)> check = [&](const Expr& e, std::size_t dim) {
        if (err) return;
        auto fail = [&](const std::string& msg) { err.emplace(msg, path); };
        if (e.dim != dim) return fail("node has dim " + std::to_string(e.dim) + ", dim " + std::to_string(dim) + " required");
        switch (e.kind) {
        case ExprKind::Action: return fail("action '" + e.name + "' used as a value");
        case ExprKind::Var: {
            auto it = schema.variables.find(e.name);
            if (it == schema.variables.end()) return fail("unknown variable '" + e.name + "'");
            if (it->second != dim) return fail("variable '" + e.name + "' has wrong dim");
            return;
        }
        case ExprKind::Param: {
            auto it = p.params.find(e.name);
            if (it == p.params.end()) return fail("parameter '" + e.name + "' has no value");
            if (it->second.size() != dim) return fail("parameter '" + e.name + "' has wrong dim");
            return;
        }
        case ExprKind::Const:
            if (e.value.size() != dim) return fail("constant has wrong dim");
            return;
        case ExprKind::Call: {
            const FunctionSpec* f = lib.find(e.name);
            if (!f) return fail("unknown function '" + e.name + "'");
            if (e.args.size() != f->arity) return fail("arity mismatch for '" + e.name + "'");
            auto dims = f->arg_dims(dim);
            if (!dims) return fail("'" + e.name + "' cannot produce dim " + std::to_string(dim));
            for (std::size_t i = 0; i < e.args.size(); ++i) {
                path.push_back(i);
                check(e.args[i], (*dims)[i]);
                path.pop_back();
            }
            return;
        }
        }
    };
    for (std::size_t i = 0; i < p.body.size() && !err; ++i) {
        path.assign(1, i);
        const Expr& root = p.body[i];
        if (root.kind != ExprKind::Action) {
            err.emplace("body expression is not an action call", path);
            break;
        }
        auto it = schema.actions.find(root.name);
        if (it == schema.actions.end()) {
            err.emplace("unknown action '" + root.name + "'", path);
            break;
        }
        if (root.args.size() != 1) {
            err.emplace("action takes exactly one argument", path);
            break;
        }
        path.push_back(0);
        check(root.args[0], it->second);
    }
    return err;
}

/// Replaces the leaf at `path` (or appends at the body slot) with `subtree`.
/// Parameters of the subtree are renamed to fresh ids and their values taken
/// from `subtree_params`; a replaced parameter that is no longer referenced is
/// dropped.
inline Program replace_leaf(const Program& p, const Path& path, const Expr& subtree,
                            const std::map<std::string, Vec>& subtree_params = {})
{
    Program out = p;
    if (path.size() == 1 && path[0] == p.body.size()) {
        if (!has_body_slot(p)) throw TypeError("program has no body slot", path);
        if (subtree.kind != ExprKind::Action) throw TypeError("body slot takes an action call", path);
        out.body.push_back(subtree);
    } else {
        Expr* target = detail::node_at(out.body, path);
        if (!target || !target->is_leaf()) throw TypeError("path does not name a leaf", path);
        if (subtree.dim != target->dim)
            throw TypeError("subtree dim " + std::to_string(subtree.dim) + " does not match leaf dim "
                                + std::to_string(target->dim),
                            path);
        *target = subtree;
    }

    // Fresh names for the subtree's parameters.
    std::size_t next = 0;
    auto fresh = [&] {
        std::string name;
        do name = "p" + std::to_string(next++);
        while (out.params.count(name));
        return name;
    };
    Expr* inserted = (path.size() == 1 && path[0] == p.body.size()) ? &out.body.back() : detail::node_at(out.body, path);
    std::map<std::string, std::string> renames;
    std::function<void(Expr&)> rename = [&](Expr& e) {
        if (e.kind == ExprKind::Param) {
            auto it = renames.find(e.name);
            if (it == renames.end()) {
                const std::string n = fresh();
                auto src = subtree_params.find(e.name);
                out.params[n] = src != subtree_params.end() ? src->second : Vec(e.dim, 0.0);
                it = renames.emplace(e.name, n).first;
            }
            e.name = it->second;
            return;
        }
        for (auto& a : e.args) rename(a);
    };
    // Existing ids must not be captured as fresh names while renaming.
    auto live = param_names(p);
    for (auto it = out.params.begin(); it != out.params.end();) {
        if (std::find(live.begin(), live.end(), it->first) == live.end()) it = out.params.erase(it);
        else ++it;
    }
    rename(*inserted);
    auto now = param_names(out);
    for (auto it = out.params.begin(); it != out.params.end();) {
        if (std::find(now.begin(), now.end(), it->first) == now.end()) it = out.params.erase(it);
        else ++it;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Canonical form
// ---------------------------------------------------------------------------

namespace detail {

inline std::string shape_key(const Expr& e, const FunctionLibrary& lib)
{
    switch (e.kind) {
    case ExprKind::Var: return e.name;
    case ExprKind::Param: return "?" + std::to_string(e.dim);
    case ExprKind::Const: return format_vec(e.value);
    default: break;
    }
    std::string s = "(" + e.name;
    for (const auto& a : e.args) s += " " + shape_key(a, lib);
    return s + ")";
}

inline void sort_commutative(Expr& e, const FunctionLibrary& lib)
{
    for (auto& a : e.args) sort_commutative(a, lib);
    if (e.kind != ExprKind::Call) return;
    const FunctionSpec* f = lib.find(e.name);
    if (!f || !f->commutes(e.dim)) return;
    std::stable_sort(e.args.begin(), e.args.end(), [&](const Expr& a, const Expr& b) {
        return shape_key(a, lib) < shape_key(b, lib);
    });
}

} // namespace detail

/// Commutative arguments sorted by shape, parameters renamed p0, p1, ... in
/// depth-first order. Two programs that differ only in argument order of a
/// commutative function or in parameter naming canonicalize identically.
inline Program canonicalize(const Program& p, const FunctionLibrary& lib = FunctionLibrary::standard())
{
    Program out = p;
    for (auto& e : out.body) detail::sort_commutative(e, lib);
    std::map<std::string, std::string> renames;
    std::map<std::string, Vec> params;
    std::function<void(Expr&)> rename = [&](Expr& e) {
        if (e.kind == ExprKind::Param) {
            auto it = renames.find(e.name);
            if (it == renames.end()) {
                const std::string n = "p" + std::to_string(renames.size());
                if (auto v = p.params.find(e.name); v != p.params.end()) params[n] = v->second;
                it = renames.emplace(e.name, n).first;
            }
            e.name = it->second;
            return;
        }
        for (auto& a : e.args) rename(a);
    };
    for (auto& e : out.body) rename(e);
    out.params = std::move(params);
    return out;
}

/// Key used to suppress structurally duplicate candidates.
inline std::string canonical_key(const Program& p, const FunctionLibrary& lib = FunctionLibrary::standard())
{
    return print(canonicalize(p, lib), lib);
}

} // namespace pim
