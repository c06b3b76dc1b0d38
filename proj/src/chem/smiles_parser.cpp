#include <cctype>
#include <map>

#include "frigid/chemgraph.hpp"

namespace frigid::chem {

namespace {

using Kind = SmilesError::Kind;

struct RingOpen {
  int atom;
  std::optional<BondOrder> order;
  std::size_t offset;
  std::size_t digit_token;
  std::optional<std::size_t> bond_token;
};

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  ParsedSmiles run() {
    if (text_.empty()) throw SmilesError(Kind::EmptyInput, 0, "empty SMILES");
    while (pos_ < text_.size()) step();
    if (!branches_.empty()) {
      throw SmilesError(Kind::UnbalancedParenthesis, branches_.back().offset, "unclosed branch");
    }
    if (pending_bond_) throw SmilesError(Kind::Syntax, pending_bond_offset_, "bond without a following atom");
    if (!rings_.empty()) {
      std::size_t first = text_.size();
      for (const auto& [num, r] : rings_) first = std::min(first, r.offset);
      throw SmilesError(Kind::UnclosedRing, first, "unclosed ring");
    }
    if (prev_atom_ < 0) throw SmilesError(Kind::Syntax, text_.size(), "no atoms");
    out_.mol.perceive_rings();
    return std::move(out_);
  }

 private:
  struct BranchFrame {
    int atom;
    std::size_t offset;
  };

  void step() {
    const char ch = text_[pos_];
    switch (ch) {
      case '(': {
        if (prev_atom_ < 0 || pending_bond_) throw SmilesError(Kind::Syntax, pos_, "branch without a preceding atom");
        branches_.push_back({prev_atom_, pos_});
        push_token(pos_, pos_ + 1, LexKind::BranchOpen, {});
        ++pos_;
        return;
      }
      case ')': {
        if (branches_.empty()) throw SmilesError(Kind::UnbalancedParenthesis, pos_, "unmatched ')'");
        if (pending_bond_) throw SmilesError(Kind::Syntax, pos_, "bond before ')'");
        if (last_kind_ == LexKind::BranchOpen) throw SmilesError(Kind::Syntax, pos_, "empty branch");
        prev_atom_ = branches_.back().atom;
        branches_.pop_back();
        push_token(pos_, pos_ + 1, LexKind::BranchClose, {});
        ++pos_;
        return;
      }
      case '.': {
        if (prev_atom_ < 0 || pending_bond_ || !branches_.empty()) throw SmilesError(Kind::Syntax, pos_, "misplaced '.'");
        prev_atom_ = -1;
        push_token(pos_, pos_ + 1, LexKind::Dot, {});
        ++pos_;
        return;
      }
      case '-':
      case '=':
      case '#':
      case ':':
      case '/':
      case '\\': {
        if (prev_atom_ < 0 || pending_bond_) throw SmilesError(Kind::Syntax, pos_, "misplaced bond symbol");
        BondOrder order = BondOrder::Single;
        if (ch == '=') order = BondOrder::Double;
        if (ch == '#') order = BondOrder::Triple;
        if (ch == ':') order = BondOrder::Aromatic;
        pending_bond_ = order;
        pending_bond_offset_ = pos_;
        pending_bond_token_ = push_token(pos_, pos_ + 1, LexKind::Bond, {});
        ++pos_;
        return;
      }
      case '%':
        ring_closure();
        return;
      case '[':
        bracket_atom();
        return;
      default:
        if (std::isdigit(static_cast<unsigned char>(ch))) {
          ring_closure();
          return;
        }
        organic_atom();
        return;
    }
  }

  std::size_t push_token(std::size_t b, std::size_t e, LexKind kind, std::vector<int> atoms) {
    out_.tokens.push_back(LexToken{b, e, kind, std::move(atoms)});
    last_kind_ = kind;
    return out_.tokens.size() - 1;
  }

  static std::vector<int> pair(int a, int b) { return a < b ? std::vector<int>{a, b} : std::vector<int>{b, a}; }

  void ring_closure() {
    const std::size_t start = pos_;
    if (prev_atom_ < 0) throw SmilesError(Kind::Syntax, pos_, "ring closure without an atom");
    int num = 0;
    if (text_[pos_] == '%') {
      if (pos_ + 2 >= text_.size() || !std::isdigit(static_cast<unsigned char>(text_[pos_ + 1])) ||
          !std::isdigit(static_cast<unsigned char>(text_[pos_ + 2]))) {
        throw SmilesError(Kind::Syntax, pos_, "'%' must be followed by two digits");
      }
      num = (text_[pos_ + 1] - '0') * 10 + (text_[pos_ + 2] - '0');
      pos_ += 3;
    } else {
      num = text_[pos_] - '0';
      pos_ += 1;
    }
    const std::size_t tok = push_token(start, pos_, LexKind::RingClosure, {});
    auto bond_order = pending_bond_;
    auto bond_tok = pending_bond_ ? std::optional<std::size_t>(pending_bond_token_) : std::nullopt;
    pending_bond_.reset();

    auto it = rings_.find(num);
    if (it == rings_.end()) {
      rings_.emplace(num, RingOpen{prev_atom_, bond_order, start, tok, bond_tok});
      return;
    }
    const RingOpen open = it->second;
    rings_.erase(it);
    if (open.atom == prev_atom_) throw SmilesError(Kind::Syntax, start, "ring closure onto the same atom");
    if (open.order && bond_order && *open.order != *bond_order) {
      throw SmilesError(Kind::Syntax, start, "conflicting ring closure bond orders");
    }
    BondOrder order;
    if (open.order) {
      order = *open.order;
    } else if (bond_order) {
      order = *bond_order;
    } else {
      order = default_order(open.atom, prev_atom_);
    }
    if (out_.mol.bond_between(open.atom, prev_atom_)) throw SmilesError(Kind::Syntax, start, "duplicate ring bond");
    out_.mol.add_bond(open.atom, prev_atom_, order);
    const auto atoms = pair(open.atom, prev_atom_);
    out_.tokens[open.digit_token].atoms = atoms;
    out_.tokens[tok].atoms = atoms;
    if (open.bond_token) out_.tokens[*open.bond_token].atoms = atoms;
    if (bond_tok) out_.tokens[*bond_tok].atoms = atoms;
  }

  BondOrder default_order(int a, int b) const {
    const auto& mol = out_.mol;
    return mol.atom(a).aromatic && mol.atom(b).aromatic ? BondOrder::Aromatic : BondOrder::Single;
  }

  void attach(int atom, std::size_t tok_begin, std::size_t tok_end) {
    push_token(tok_begin, tok_end, LexKind::Atom, {atom});
    if (prev_atom_ >= 0) {
      const BondOrder order = pending_bond_ ? *pending_bond_ : default_order(prev_atom_, atom);
      out_.mol.add_bond(prev_atom_, atom, order);
      if (pending_bond_) out_.tokens[pending_bond_token_].atoms = pair(prev_atom_, atom);
    }
    pending_bond_.reset();
    prev_atom_ = atom;
  }

  void organic_atom() {
    const std::size_t start = pos_;
    const char ch = text_[pos_];
    Atom atom;
    std::size_t len = 1;
    if (ch == 'C' && pos_ + 1 < text_.size() && text_[pos_ + 1] == 'l') {
      atom.element = Element::Cl;
      len = 2;
    } else if (ch == 'B' && pos_ + 1 < text_.size() && text_[pos_ + 1] == 'r') {
      atom.element = Element::Br;
      len = 2;
    } else {
      switch (ch) {
        case 'B': atom.element = Element::B; break;
        case 'C': atom.element = Element::C; break;
        case 'N': atom.element = Element::N; break;
        case 'O': atom.element = Element::O; break;
        case 'P': atom.element = Element::P; break;
        case 'S': atom.element = Element::S; break;
        case 'F': atom.element = Element::F; break;
        case 'I': atom.element = Element::I; break;
        case 'b': atom.element = Element::B; atom.aromatic = true; break;
        case 'c': atom.element = Element::C; atom.aromatic = true; break;
        case 'n': atom.element = Element::N; atom.aromatic = true; break;
        case 'o': atom.element = Element::O; atom.aromatic = true; break;
        case 'p': atom.element = Element::P; atom.aromatic = true; break;
        case 's': atom.element = Element::S; atom.aromatic = true; break;
        default:
          if (std::isalpha(static_cast<unsigned char>(ch))) {
            throw SmilesError(Kind::UnknownElement, pos_, std::string("unknown element '") + ch + "'");
          }
          throw SmilesError(Kind::Syntax, pos_, std::string("unexpected character '") + ch + "'");
      }
    }
    pos_ += len;
    const int idx = out_.mol.add_atom(atom);
    attach(idx, start, pos_);
  }

  void bracket_atom() {
    const std::size_t start = pos_;
    const std::size_t close = text_.find(']', pos_);
    if (close == std::string_view::npos) throw SmilesError(Kind::Syntax, pos_, "unterminated bracket atom");
    std::size_t i = pos_ + 1;
    if (i < close && std::isdigit(static_cast<unsigned char>(text_[i]))) {
      throw SmilesError(Kind::Syntax, i, "isotope labels are not supported");
    }
    Atom atom;
    // Element symbol: aromatic lowercase forms or Capital[lower].
    if (i >= close) throw SmilesError(Kind::Syntax, i, "empty bracket atom");
    const char c0 = text_[i];
    std::optional<Element> element;
    std::size_t sym_len = 0;
    if (std::islower(static_cast<unsigned char>(c0))) {
      const std::string_view arom[] = {"b", "c", "n", "o", "p", "s"};
      for (auto a : arom) {
        if (c0 == a[0]) {
          std::string up(1, static_cast<char>(std::toupper(static_cast<unsigned char>(c0))));
          element = element_from_symbol(up);
          atom.aromatic = true;
          sym_len = 1;
        }
      }
    } else if (std::isupper(static_cast<unsigned char>(c0))) {
      if (i + 1 < close && std::islower(static_cast<unsigned char>(text_[i + 1]))) {
        element = element_from_symbol(text_.substr(i, 2));
        sym_len = 2;
        if (!element) {
          // e.g. "[Sc]" is scandium, not S followed by aromatic c.
          throw SmilesError(Kind::UnknownElement, i, "unknown element '" + std::string(text_.substr(i, 2)) + "'");
        }
      } else {
        element = element_from_symbol(text_.substr(i, 1));
        sym_len = 1;
      }
    }
    if (!element) throw SmilesError(Kind::UnknownElement, i, "unknown element in bracket atom");
    atom.element = *element;
    i += sym_len;
    while (i < close && text_[i] == '@') ++i;  // chirality is ignored
    int h = 0;
    if (i < close && text_[i] == 'H') {
      ++i;
      h = 1;
      if (i < close && std::isdigit(static_cast<unsigned char>(text_[i]))) {
        h = 0;
        while (i < close && std::isdigit(static_cast<unsigned char>(text_[i]))) h = h * 10 + (text_[i++] - '0');
      }
    }
    int charge = 0;
    if (i < close && (text_[i] == '+' || text_[i] == '-')) {
      const char sign_ch = text_[i];
      const int sign = sign_ch == '+' ? 1 : -1;
      int mag = 0;
      while (i < close && text_[i] == sign_ch) {
        ++mag;
        ++i;
      }
      if (mag == 1 && i < close && std::isdigit(static_cast<unsigned char>(text_[i]))) {
        mag = 0;
        while (i < close && std::isdigit(static_cast<unsigned char>(text_[i]))) mag = mag * 10 + (text_[i++] - '0');
      }
      charge = sign * mag;
    }
    if (i != close) throw SmilesError(Kind::Syntax, i, "unexpected character in bracket atom");
    atom.explicit_h = h;
    atom.formal_charge = charge;
    pos_ = close + 1;
    const int idx = out_.mol.add_atom(atom);
    attach(idx, start, pos_);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  ParsedSmiles out_;
  int prev_atom_ = -1;
  std::optional<BondOrder> pending_bond_;
  std::size_t pending_bond_offset_ = 0;
  std::size_t pending_bond_token_ = 0;
  LexKind last_kind_ = LexKind::Dot;
  std::vector<BranchFrame> branches_;
  std::map<int, RingOpen> rings_;
};

}  // namespace

ParsedSmiles parse_smiles_traced(std::string_view text) { return Parser(text).run(); }

Molecule parse_smiles(std::string_view text) { return parse_smiles_traced(text).mol; }

}  // namespace frigid::chem
