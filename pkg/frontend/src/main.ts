import { ReviewApi } from "./api.js";
import { ReviewApp } from "./view.js";

function raterFromQuery(): string | null {
  const params = new URLSearchParams(window.location.search);
  return params.get("rater");
}

function boot(): void {
  const root = document.getElementById("app");
  if (!root) return;
  const rater = raterFromQuery();
  if (!rater) {
    root.textContent = "Append ?rater=<your-token> to the URL to begin.";
    return;
  }
  const app = new ReviewApp(root, new ReviewApi(""), rater);
  void app.start();
}

boot();
